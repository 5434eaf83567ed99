//! Reverse-mode tape over rank-2 tensors.

use crate::tensor::{gemm, Tensor};
use std::cell::RefCell;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// `1 × F` to `rows × F`.
    BroadcastRows(usize),
    /// `B × 1` to `B × cols`.
    BroadcastCols(usize),
    /// `B × F` to `kB × F` by stacking `k` copies.
    TileRows(usize, usize),
    /// `kB × F` to `k × F` by summing the rows of each block.
    BlockSum(usize, usize),
    RowSum(usize),
    Sum(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    Silu(usize),
    SiluDeriv(usize),
    Sigmoid(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    /// `(x + eps)^(-1/2)`.
    Rsqrt(usize),
    /// Elementwise product with broadcasting, see [`Var::mul_bcast`].
    BMul(usize, usize),
    BAdd(usize, usize),
    /// `s·(1 + x·(1 − s))` from `x` and `s = σ(x)`.
    SiluGrad(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are referenced through
/// [`Var`] handles that borrow the tape.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_d1(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_d2(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        assert!(value.is_matrix(), "tape values must be rank-2");
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        assert!(value.is_matrix(), "tape values must be rank-2");
        self.push(value, Op::Leaf, false)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
    ) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[a].value, &nodes[b].value),
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        self.push(value, op, rg)
    }

    /// Runs the reverse sweep from a one-element output.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "gradients() needs a one-element output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(1, 1, 1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, contribution: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_scaled(&contribution, 1.0),
        slot @ None => *slot = Some(contribution),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if rg(a) {
                let mut ga = Tensor::zeros_like(val(a));
                gemm(g, false, val(b), true, &mut ga, 0.0);
                accumulate(grads, a, ga);
            }
            if rg(b) {
                let mut gb = Tensor::zeros_like(val(b));
                gemm(val(a), true, g, false, &mut gb, 0.0);
                accumulate(grads, b, gb);
            }
        }
        &Op::Add(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.clone());
            }
            if rg(b) {
                accumulate(grads, b, g.clone());
            }
        }
        &Op::Sub(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.clone());
            }
            if rg(b) {
                accumulate(grads, b, g.scale(-1.0));
            }
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.mul(val(b)));
            }
            if rg(b) {
                accumulate(grads, b, g.mul(val(a)));
            }
        }
        &Op::Scale(a, s) => accumulate(grads, a, g.scale(s)),
        &Op::AddScalar(a) => accumulate(grads, a, g.clone()),
        &Op::BroadcastRows(a) => {
            accumulate(grads, a, Tensor::row(&g.col_sums()))
        }
        &Op::BroadcastCols(a) => accumulate(grads, a, row_sums(g)),
        &Op::TileRows(a, k) => {
            let rows = val(a).rows();
            let mut ga = g.slice_rows(0, rows);
            for i in 1..k {
                ga.add_scaled(&g.slice_rows(i * rows, (i + 1) * rows), 1.0);
            }
            accumulate(grads, a, ga);
        }
        &Op::BlockSum(a, k) => {
            let (rows, cols) = val(a).dims();
            let block = rows / k;
            let mut ga = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let src = g.row_slice(r / block);
                ga.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(src);
            }
            accumulate(grads, a, ga);
        }
        &Op::RowSum(a) => {
            let (rows, cols) = val(a).dims();
            let mut ga = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let gr = g.get(r, 0);
                ga.data_mut()[r * cols..(r + 1) * cols].fill(gr);
            }
            accumulate(grads, a, ga);
        }
        &Op::Sum(a) => {
            let (rows, cols) = val(a).dims();
            accumulate(grads, a, Tensor::full(rows, cols, g.item()));
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    let mut gp = Tensor::zeros(rows, w);
                    for r in 0..rows {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                    accumulate(grads, p, gp);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let h = val(p).rows();
                if rg(p) {
                    accumulate(grads, p, g.slice_rows(offset, offset + h));
                }
                offset += h;
            }
        }
        &Op::SliceRows(a, start, end) => {
            let (rows, cols) = val(a).dims();
            let mut ga = Tensor::zeros(rows, cols);
            ga.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
            accumulate(grads, a, ga);
        }
        &Op::Silu(a) => accumulate(grads, a, g.zip_map(val(a), |gi, x| gi * silu_d1(x))),
        &Op::SiluDeriv(a) => accumulate(grads, a, g.zip_map(val(a), |gi, x| gi * silu_d2(x))),
        &Op::Sigmoid(a) => accumulate(grads, a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))),
        &Op::Log(a) => accumulate(grads, a, g.zip_map(val(a), |gi, x| gi / x)),
        &Op::Sin(a) => accumulate(grads, a, g.zip_map(val(a), |gi, x| gi * x.cos())),
        &Op::Cos(a) => accumulate(grads, a, g.zip_map(val(a), |gi, x| -gi * x.sin())),
        &Op::Relu(a) => accumulate(
            grads,
            a,
            g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
        ),
        &Op::Clamp(a, lo, hi) => accumulate(
            grads,
            a,
            g.zip_map(val(a), |gi, x| if (lo..=hi).contains(&x) { gi } else { 0.0 }),
        ),
        &Op::Rsqrt(a) => accumulate(
            grads,
            a,
            g.zip_map(&node.value, |gi, y| -0.5 * gi * y * y * y),
        ),
        &Op::BMul(a, b) => {
            if rg(a) {
                let ga = broadcast_zip(g, val(b), |x, y| x * y);
                accumulate(grads, a, reduce_to(ga, val(a).dims()));
            }
            if rg(b) {
                let gb = broadcast_zip(g, val(a), |x, y| x * y);
                accumulate(grads, b, reduce_to(gb, val(b).dims()));
            }
        }
        &Op::BAdd(a, b) => {
            if rg(a) {
                accumulate(grads, a, reduce_to(g.clone(), val(a).dims()));
            }
            if rg(b) {
                accumulate(grads, b, reduce_to(g.clone(), val(b).dims()));
            }
        }
        &Op::SiluGrad(x, s) => {
            if rg(x) {
                let gx = g.zip_map(val(s), |gi, si| gi * si * (1.0 - si));
                accumulate(grads, x, gx);
            }
            if rg(s) {
                let d = val(x).zip_map(val(s), |xi, si| 1.0 + xi * (1.0 - 2.0 * si));
                accumulate(grads, s, g.mul(&d));
            }
        }
    }
}

/// Output shape of a broadcast between two matrices: rows must divide the
/// larger row count (the smaller operand is tiled vertically) and columns
/// must match or be 1.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let rows = a.0.max(b.0);
    let cols = a.1.max(b.1);
    let ok = |(r, c): (usize, usize)| r > 0 && rows % r == 0 && (c == cols || c == 1);
    assert!(ok(a) && ok(b), "cannot broadcast {a:?} with {b:?}");
    (rows, cols)
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = broadcast_shape(a.dims(), b.dims());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = a.row_slice(r % a.rows());
        let br = b.row_slice(r % b.rows());
        match (ar.len() == cols, br.len() == cols) {
            (true, true) => out.extend(ar.iter().zip(br).map(|(x, y)| f(*x, *y))),
            (true, false) => out.extend(ar.iter().map(|x| f(*x, br[0]))),
            (false, true) => out.extend(br.iter().map(|y| f(ar[0], *y))),
            (false, false) => out.extend(std::iter::repeat_n(f(ar[0], br[0]), cols)),
        }
    }
    Tensor::from_vec(rows, cols, out)
}

/// Sums a broadcast result back down to `shape`.
fn reduce_to(t: Tensor, shape: (usize, usize)) -> Tensor {
    if t.dims() == shape {
        return t;
    }
    let (rows, cols) = shape;
    let mut out = Tensor::zeros(rows, cols);
    let data = out.data_mut();
    for r in 0..t.rows() {
        let src = t.row_slice(r);
        let dst = &mut data[(r % rows) * cols..(r % rows + 1) * cols];
        if cols == src.len() {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        } else {
            dst[0] += src.iter().sum::<f64>();
        }
    }
    out
}

fn row_sums(t: &Tensor) -> Tensor {
    let rows = t.rows();
    Tensor::from_vec(rows, 1, (0..rows).map(|r| t.row_slice(r).iter().sum()).collect())
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the
    /// output (or is a constant).
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Like [`wrt`](Self::wrt) but materializes zeros for unreached inputs.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(&v.value()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary(self.id, other.id, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary(self.id, other.id, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary(self.id, other.id, Op::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary(self.id, other.id, Op::Mul(self.id, other.id), |a, b| a.mul(b))
    }

    /// Elementwise product with broadcasting. An operand with fewer rows is
    /// tiled vertically (its row count must divide the other's) and a
    /// single column is repeated across columns.
    pub fn mul_bcast(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        if self.shape() == other.shape() {
            return self.mul(other);
        }
        self.tape
            .binary(self.id, other.id, Op::BMul(self.id, other.id), |a, b| {
                broadcast_zip(a, b, |x, y| x * y)
            })
    }

    /// Sum with the broadcasting rules of [`mul_bcast`](Self::mul_bcast).
    pub fn add_bcast(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        if self.shape() == other.shape() {
            return self.add(other);
        }
        self.tape
            .binary(self.id, other.id, Op::BAdd(self.id, other.id), |a, b| {
                broadcast_zip(a, b, |x, y| x + y)
            })
    }

    /// SiLU derivative given the precomputed sigmoid `s` of `self`.
    pub(crate) fn silu_grad_from_sigmoid(self, s: Var<'t>) -> Var<'t> {
        self.same_tape(&s);
        self.tape
            .binary(self.id, s.id, Op::SiluGrad(self.id, s.id), |x, s| {
                x.zip_map(s, |xi, si| si * (1.0 + xi * (1.0 - si)))
            })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, s), |a| a.scale(s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::AddScalar(self.id), |a| a.map(|v| v + c))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    /// Repeats a `1 × F` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastRows(self.id), |a| {
            assert_eq!(a.rows(), 1, "broadcast_rows needs a single row");
            let mut data = Vec::with_capacity(rows * a.cols());
            for _ in 0..rows {
                data.extend_from_slice(a.data());
            }
            Tensor::from_vec(rows, a.cols(), data)
        })
    }

    /// Repeats a `B × 1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastCols(self.id), |a| {
            assert_eq!(a.cols(), 1, "broadcast_cols needs a single column");
            let mut data = Vec::with_capacity(a.rows() * cols);
            for &v in a.data() {
                data.extend(std::iter::repeat_n(v, cols));
            }
            Tensor::from_vec(a.rows(), cols, data)
        })
    }

    /// Stacks `k` copies of the matrix vertically.
    pub fn tile_rows(self, k: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::TileRows(self.id, k), |a| {
            let parts: Vec<&Tensor> = std::iter::repeat_n(a, k).collect();
            Tensor::vstack(&parts)
        })
    }

    /// Sums the rows within each of `k` equal vertical blocks.
    pub fn block_sum(self, k: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BlockSum(self.id, k), |a| {
            let (rows, cols) = a.dims();
            assert!(k > 0 && rows % k == 0, "block_sum: {rows} rows into {k} blocks");
            let block = rows / k;
            let mut out = Tensor::zeros(k, cols);
            for r in 0..rows {
                let dst = &mut out.data_mut()[(r / block) * cols..(r / block + 1) * cols];
                for (d, s) in dst.iter_mut().zip(a.row_slice(r)) {
                    *d += s;
                }
            }
            out
        })
    }

    /// Per-row sum, `B × F` to `B × 1`.
    pub fn row_sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowSum(self.id), row_sums)
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.shape();
        self.sum().scale(1.0 / (n.0 * n.1) as f64)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (value, rg) = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[ids[0]].value.rows();
            let total: usize = ids.iter().map(|&i| nodes[i].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &ids {
                    let v = &nodes[i].value;
                    assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            (
                Tensor::from_vec(rows, total, data),
                ids.iter().any(|&i| nodes[i].requires_grad),
            )
        };
        tape.push(value, Op::ConcatCols(ids), rg)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (value, rg) = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            (
                Tensor::vstack(&refs),
                ids.iter().any(|&i| nodes[i].requires_grad),
            )
        };
        tape.push(value, Op::ConcatRows(ids), rg)
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        self.tape
            .unary(self.id, Op::SliceRows(self.id, start, end), |a| a.slice_rows(start, end))
    }

    pub fn silu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Silu(self.id), |a| a.map(silu))
    }

    /// Elementwise derivative of SiLU; differentiable itself.
    pub fn silu_deriv(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::SiluDeriv(self.id), |a| a.map(silu_d1))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sin(self.id), |a| a.map(f64::sin))
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Cos(self.id), |a| a.map(f64::cos))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Clamp(self.id, lo, hi), |a| a.map(|v| v.clamp(lo, hi)))
    }

    /// `(x + eps)^(-1/2)` elementwise.
    pub fn rsqrt(self, eps: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Rsqrt(self.id), |a| {
            a.map(|v| 1.0 / (v + eps).sqrt())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a> + Copy, x: Tensor) {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let out = f(&tape, v);
        let g = tape.gradients(out).wrt_or_zeros(v);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let tp = Tape::new();
            let fp = f(&tp, tp.var(xp)).item();
            let tm = Tape::new();
            let fm = f(&tm, tm.var(xm)).item();
            let fd = (fp - fm) / (2.0 * eps);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    fn sample() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.5, 0.2, -0.4]])
    }

    #[test]
    fn elementwise_backward_matches_finite_differences() {
        fd_check(|_, x| x.silu().sum(), sample());
        fd_check(|_, x| x.silu_deriv().sum(), sample());
        fd_check(|_, x| x.sigmoid().log().sum(), sample());
        fd_check(|_, x| x.sin().mul(x.cos()).sum(), sample());
        fd_check(|_, x| x.square().rsqrt(1e-3).sum(), sample());
        fd_check(|_, x| x.add_scalar(2.0).log().scale(3.0).sum(), sample());
    }

    #[test]
    fn structural_backward_matches_finite_differences() {
        fd_check(|_, x| x.row_sum().square().sum(), sample());
        fd_check(|_, x| x.tile_rows(3).silu().block_sum(3).square().sum(), sample());
        fd_check(
            |_, x| x.row_sum().broadcast_cols(4).sin().sum(),
            sample(),
        );
        fd_check(
            |_, x| {
                let r = x.slice_rows(0, 1);
                r.broadcast_rows(5).cos().sum()
            },
            sample(),
        );
        fd_check(
            |_, x| Var::concat_cols(&[x, x.square()]).matmul(x.tape().constant(Tensor::full(6, 1, 0.5))).square().sum(),
            sample(),
        );
        fd_check(
            |_, x| Var::concat_rows(&[x, x.silu()]).slice_rows(1, 3).square().sum(),
            sample(),
        );
        fd_check(|t, x| {
            let w = t.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.1], vec![-0.3, 0.9]]));
            x.matmul(w).relu().sum()
        }, sample());
    }

    #[test]
    fn matmul_gradients_for_both_operands() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = tape.var(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let out = a.matmul(b).sum();
        assert_eq!(out.item(), 11.0);
        let g = tape.gradients(out);
        assert_eq!(g.wrt(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.var(Tensor::scalar(3.0));
        let g = tape.gradients(c.mul(x));
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    #[should_panic(expected = "one-element output")]
    fn non_scalar_backward_panics() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 1));
        let _ = tape.gradients(x.silu());
    }
}
