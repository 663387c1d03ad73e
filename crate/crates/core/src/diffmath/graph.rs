//! Tape-style computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node index order is already
//! a topological order and `backward` is a single reverse sweep. There is no
//! broadcasting: every operator documents the exact shapes it accepts.

use super::tensor::{self, Tensor};
use super::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize / concatenate along rows (down a column).
    Rows,
    /// Normalize / concatenate along columns (across a row).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    LogSoftmax { input: Var, axis: Axis },
    SumAll(Var),
    Pick { input: Var, cells: Vec<(usize, usize)> },
    Reshape(Var),
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Gradient slot of a parent, allocated on first use; `None` when the parent
/// does not take gradients.
fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    needs_grad: &[bool],
    values: &[Tensor],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !needs_grad[v.0] {
        return None;
    }
    let n = values[v.0].len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from gradient propagation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Registers every parameter of the store as a differentiable leaf, in
    /// store order.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        store
            .iter()
            .map(|p| self.variable(p.value.clone()))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient of a node, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for a list of leaves, zero-filled where none flowed.
    pub fn gradients(&self, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter()
            .map(|&v| match &self.grads[v.0] {
                Some(g) => g.clone(),
                None => vec![0.0; self.values[v.0].len()],
            })
            .collect()
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(&self.values[a.0], &self.values[b.0])?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, g))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let (r, c) = ta.dims2()?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_kernel(r, c, data, name)
    }

    fn unary(&self, a: Var, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = &self.values[a.0];
        let (r, c) = t.dims2()?;
        Tensor::from_kernel(r, c, t.data().iter().map(|&x| f(x)).collect(), name)
    }

    /// Same-shape addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, g))
    }

    /// Same-shape subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, g))
    }

    /// Same-shape elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.unary(a, "scale", |x| x * factor)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::Scale(a, factor), out, g))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        let out = self.unary(a, "offset", |x| x + shift)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::Offset(a), out, g))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "tanh", f64::tanh)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::Tanh(a), out, g))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "exp", f64::exp)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::Exp(a), out, g))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "relu", |x| x.max(0.0))?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::Relu(a), out, g))
    }

    /// Embedding lookup: rows `ids` of a `[V×E]` table, giving `[len(ids)×E]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.values[table.0];
        let (v, e) = t.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_kernel(ids.len(), e, data, "gather")?;
        let g = self.any_grad(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            g,
        ))
    }

    /// Concatenation. `Axis::Cols` joins side by side (equal row counts),
    /// `Axis::Rows` stacks vertically (equal column counts).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let (r0, c0) = self.values[first.0].dims2()?;
        let out = match axis {
            Axis::Cols => {
                let mut total = 0;
                for p in parts {
                    let (r, c) = self.values[p.0].dims2()?;
                    if r != r0 {
                        return Err(shape_err("concat", &self.values[first.0], &self.values[p.0]));
                    }
                    total += c;
                }
                let mut data = Vec::with_capacity(r0 * total);
                for row in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.values[p.0].row_slice(row));
                    }
                }
                Tensor::from_kernel(r0, total, data, "concat")?
            }
            Axis::Rows => {
                let mut total = 0;
                for p in parts {
                    let (r, c) = self.values[p.0].dims2()?;
                    if c != c0 {
                        return Err(shape_err("concat", &self.values[first.0], &self.values[p.0]));
                    }
                    total += r;
                }
                let mut data = Vec::with_capacity(total * c0);
                for p in parts {
                    data.extend_from_slice(self.values[p.0].data());
                }
                Tensor::from_kernel(total, c0, data, "concat")?
            }
        };
        let g = self.any_grad(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
            g,
        ))
    }

    /// Log-softmax with max subtraction. `Axis::Cols` normalizes each row,
    /// `Axis::Rows` normalizes each column.
    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = &self.values[a.0];
        let out = match axis {
            Axis::Cols => tensor::log_softmax_rows(t)?,
            Axis::Rows => {
                let (r, c) = t.dims2()?;
                let mut out = vec![0.0; r * c];
                let mut lane = vec![0.0; r];
                let mut lane_out = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        lane[i] = t.data()[i * c + j];
                    }
                    tensor::log_softmax_lane(&lane, &mut lane_out);
                    for i in 0..r {
                        out[i * c + j] = lane_out[i];
                    }
                }
                Tensor::from_kernel(r, c, out, "log_softmax")?
            }
        };
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::LogSoftmax { input: a, axis }, out, g))
    }

    /// Sum of all elements, as a `[1×1]` scalar.
    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.values[a.0].data().iter().sum();
        let out = Tensor::from_kernel(1, 1, vec![s], "reduce_sum")?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::SumAll(a), out, g))
    }

    /// Selects individual `(row, col)` cells into a `[1×n]` row.
    pub fn pick(&mut self, a: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let t = &self.values[a.0];
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(cells.len());
        for &(i, j) in cells {
            if i >= r || j >= c {
                return Err(Error::InvalidInput(format!(
                    "pick cell ({i}, {j}) outside shape [{r}, {c}]"
                )));
            }
            data.push(t.data()[i * c + j]);
        }
        let out = Tensor::from_kernel(1, cells.len(), data, "pick")?;
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Op::Pick {
                input: a,
                cells: cells.to_vec(),
            },
            out,
            g,
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.values[a.0].reshaped(vec![rows, cols])?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), out, g))
    }

    /// Propagates gradients from a scalar root. Each graph supports exactly
    /// one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let Graph {
            ops,
            values,
            needs_grad,
            grads,
            ..
        } = self;
        let out = &values[idx];
        match &ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = values[a.0].dims2().expect("rank-2");
                let n = values[b.0].cols();
                if let Some(ga) = slot(grads, needs_grad, values, *a) {
                    tensor::matmul_nt_acc(g, values[b.0].data(), ga, m, k, n);
                }
                if let Some(gb) = slot(grads, needs_grad, values, *b) {
                    tensor::matmul_tn_acc(values[a.0].data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(acc) = slot(grads, needs_grad, values, v) {
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(acc) = slot(grads, needs_grad, values, *b) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    for ((x, gi), bi) in acc.iter_mut().zip(g).zip(values[b.0].data()) {
                        *x += gi * bi;
                    }
                }
                if let Some(acc) = slot(grads, needs_grad, values, *b) {
                    for ((x, gi), ai) in acc.iter_mut().zip(g).zip(values[a.0].data()) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Tanh(a) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    for ((x, gi), yi) in acc.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    for ((x, gi), yi) in acc.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * yi;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    for ((x, gi), xi) in acc.iter_mut().zip(g).zip(values[a.0].data()) {
                        if *xi > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let e = values[table.0].cols();
                if let Some(acc) = slot(grads, needs_grad, values, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * e..(row + 1) * e];
                        for (x, y) in acc[id * e..(id + 1) * e].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = out.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = values[p.0].dims2().expect("rank-2");
                    if let Some(acc) = slot(grads, needs_grad, values, *p) {
                        match axis {
                            Axis::Cols => {
                                for row in 0..r {
                                    let start = row * total_cols + offset;
                                    let src = &g[start..start + c];
                                    for (x, y) in acc[row * c..(row + 1) * c].iter_mut().zip(src) {
                                        *x += y;
                                    }
                                }
                            }
                            Axis::Rows => {
                                let src = &g[offset * c..(offset + r) * c];
                                for (x, y) in acc.iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Cols => c,
                        Axis::Rows => r,
                    };
                }
            }
            Op::LogSoftmax { input, axis } => {
                let (r, c) = out.dims2().expect("rank-2");
                let y = out.data();
                if let Some(acc) = slot(grads, needs_grad, values, *input) {
                    // dx = dy - softmax * sum(dy) along the normalized lane
                    match axis {
                        Axis::Cols => {
                            for i in 0..r {
                                let lane = i * c..(i + 1) * c;
                                let s: f64 = g[lane.clone()].iter().sum();
                                for j in lane {
                                    acc[j] += g[j] - y[j].exp() * s;
                                }
                            }
                        }
                        Axis::Rows => {
                            for j in 0..c {
                                let s: f64 = (0..r).map(|i| g[i * c + j]).sum();
                                for i in 0..r {
                                    let k = i * c + j;
                                    acc[k] += g[k] - y[k].exp() * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                if let Some(acc) = slot(grads, needs_grad, values, *a) {
                    acc.iter_mut().for_each(|x| *x += g0);
                }
            }
            Op::Pick { input, cells } => {
                let c = values[input.0].cols();
                if let Some(acc) = slot(grads, needs_grad, values, *input) {
                    for (k, &(i, j)) in cells.iter().enumerate() {
                        acc[i * c + j] += g[k];
                    }
                }
            }
        }
    }
}
