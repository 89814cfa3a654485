//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation evaluates immediately and records
//! how to propagate gradients. `backward` walks the tape in reverse and
//! returns the gradient of a scalar loss with respect to every
//! gradient-tracked input. Each operation checks its output for non-finite
//! values and fails with the operation name, so numeric blow-ups surface at
//! the op that produced them rather than at the loss.

use crate::error::{CoreError, Result};

use super::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Recorded operation kind. Carried for error messages and backward dispatch.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    TopkMask(Var, usize),
    MeanAll(Var),
    SumAll(Var),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    SubOuter(Var, Var),
    LayerNorm(Var, Var, Var),
    LogsumexpRows(Var),
    NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Gelu(..) => "gelu",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::TopkMask(..) => "topk_mask",
            Op::MeanAll(..) => "mean_all",
            Op::SumAll(..) => "sum_all",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::MulColBroadcast(..) => "mul_col_broadcast",
            Op::SubOuter(..) => "sub_outer",
            Op::LayerNorm(..) => "layer_norm",
            Op::LogsumexpRows(..) => "logsumexp_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::MulColBroadcast(a, b)
            | Op::SubOuter(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Gelu(a)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a)
            | Op::TopkMask(a, _)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::LogsumexpRows(a)
            | Op::NormalizeRows(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _) => vec![*a],
            Op::ConcatRows(vs) => vs.clone(),
            Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `var`. Zero if the loss does not depend
    /// on it.
    pub fn grad(&self, var: Var) -> Tensor<S> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

/// Eager computation tape.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(CoreError::numeric(
                op.name(),
                format!("non-finite value in output of shape {:?}", value.shape()),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn input(&mut self, tensor: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(tensor, Op::Input, requires_grad)
    }

    /// Leaf that never receives gradient (data, constants).
    pub fn constant(&mut self, tensor: Tensor<S>) -> Result<Var> {
        self.input(tensor, false)
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var> {
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f)?;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::of(c);
        let out = self.nodes[a.0].value.map(|v| v * cs);
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::of(c);
        let out = self.nodes[a.0].value.map(|v| v + cs);
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::AddScalar(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(CoreError::contract(format!(
                "matmul expects matrices, got {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        if av.cols() != bv.rows() {
            return Err(CoreError::contract(format!(
                "matmul inner dimension mismatch: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = matmul_data(av, bv);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(out, Op::Matmul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(CoreError::contract(format!(
                "transpose expects a matrix, got {:?}",
                av.shape()
            )));
        }
        let out = transpose_data(av);
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Transpose(a), ng)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(CoreError::contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        if shape[axis] == 0 {
            return Err(CoreError::contract("softmax along an empty axis"));
        }
        let out = axis_apply(av, axis, |lane, out_lane| {
            let max = lane.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (o, &v) in out_lane.iter_mut().zip(lane.iter()) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out_lane.iter_mut() {
                *o /= sum;
            }
        });
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Softmax(a, axis), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.exp());
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.ln());
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v * v);
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Square(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(gelu_forward);
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Gelu(a), ng)
    }

    /// Concatenate matrices along axis 0. All inputs must share the column
    /// count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_rows of zero tensors"));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(CoreError::contract(format!(
                    "concat_rows column mismatch: expected {}, got {:?}",
                    cols,
                    v.shape()
                )));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = self.any_needs_grad(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 || start >= end || end > av.rows() {
            return Err(CoreError::contract(format!(
                "slice_rows [{start}, {end}) invalid for shape {:?}",
                av.shape()
            )));
        }
        let cols = av.cols();
        let data = av.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::SliceRows(a, start, end), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 || start >= end || end > av.cols() {
            return Err(CoreError::contract(format!(
                "slice_cols [{start}, {end}) invalid for shape {:?}",
                av.shape()
            )));
        }
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.nodes[a.0].value.reshaped(shape)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::Reshape(a), ng)
    }

    /// Keep the `k` largest entries of each last-axis slice, zero the rest.
    /// Ties are broken toward the lowest index. Gradient flows only through
    /// the kept entries.
    pub fn topk_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let out = topk_mask_data(av, k)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::TopkMask(a, k), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.numel() == 0 {
            return Err(CoreError::contract("mean_all of an empty tensor"));
        }
        let n = S::of(av.numel() as f64);
        let sum: S = av.data().iter().cloned().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(sum / n), Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let sum: S = self.nodes[a.0].value.data().iter().cloned().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(sum), Op::SumAll(a), ng)
    }

    /// `x + b` where `x` is (N, M) and `b` is a length-M vector broadcast
    /// over rows.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if xv.shape().len() != 2 || bv.shape() != [xv.cols()] {
            return Err(CoreError::contract(format!(
                "add_row_broadcast shapes {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let cols = xv.cols();
        let data: Vec<S> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % cols])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.any_needs_grad(&[x, b]);
        self.push(out, Op::AddRowBroadcast(x, b), ng)
    }

    /// `x * c` where `x` is (N, M) and `c` is a length-N vector scaling each
    /// row.
    pub fn mul_col_broadcast(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (&self.nodes[x.0].value, &self.nodes[c.0].value);
        if xv.shape().len() != 2 || cv.shape() != [xv.rows()] {
            return Err(CoreError::contract(format!(
                "mul_col_broadcast shapes {:?} * {:?}",
                xv.shape(),
                cv.shape()
            )));
        }
        let cols = xv.cols();
        let data: Vec<S> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cv.data()[i / cols])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.any_needs_grad(&[x, c]);
        self.push(out, Op::MulColBroadcast(x, c), ng)
    }

    /// Outer difference of two vectors: out[n, m] = a[n] - b[m].
    pub fn sub_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 1 || bv.shape().len() != 1 {
            return Err(CoreError::contract(format!(
                "sub_outer expects vectors, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, m) = (av.shape()[0], bv.shape()[0]);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = av.data()[i];
            for j in 0..m {
                data.push(ai - bv.data()[j]);
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(out, Op::SubOuter(a, b), ng)
    }

    /// Layer normalization over the last axis of a matrix, with affine
    /// parameters `gamma` and `beta` of length M.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        if xv.shape().len() != 2 || gv.shape() != [xv.cols()] || bv.shape() != [xv.cols()] {
            return Err(CoreError::contract(format!(
                "layer_norm shapes x {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let eps = S::of(LAYER_NORM_EPS);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, inv_std) = row_moments(row, eps);
            for (c, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv_std * gv.data()[c] + bv.data()[c]);
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm(x, gamma, beta), ng)
    }

    /// Per-row log-sum-exp of a matrix, max-subtracted.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(CoreError::contract(format!(
                "logsumexp_rows expects a matrix, got {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
            data.push(max + sum.ln());
        }
        let out = Tensor::new(vec![av.rows()], data)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::LogsumexpRows(a), ng)
    }

    /// Scale each row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(CoreError::contract(format!(
                "normalize_rows expects a matrix, got {:?}",
                av.shape()
            )));
        }
        let cols = av.cols();
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            let row = av.row(r);
            let norm = row_norm(row);
            for &v in row {
                data.push(v / norm);
            }
        }
        let out = Tensor::new(vec![av.rows(), cols], data)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::NormalizeRows(a), ng)
    }

    /// Select rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(CoreError::contract("gather_rows expects a matrix"));
        }
        let cols = av.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(CoreError::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                av.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::GatherRows(a, indices.to_vec()), ng)
    }

    /// Scatter-add rows of a matrix into a zero matrix with `total_rows`
    /// rows: out[indices[i]] += a[i].
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], total_rows: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 || av.rows() != indices.len() {
            return Err(CoreError::contract("scatter_rows shape/index mismatch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= total_rows) {
            return Err(CoreError::contract(format!(
                "scatter_rows index {bad} out of range for {total_rows} rows"
            )));
        }
        let cols = av.cols();
        let mut data = vec![S::zero(); total_rows * cols];
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..cols {
                data[i * cols + c] += av.data()[r * cols + c];
            }
        }
        let out = Tensor::new(vec![total_rows, cols], data)?;
        let ng = self.nodes[a.0].needs_grad;
        self.push(out, Op::ScatterRows(a, indices.to_vec(), total_rows), ng)
    }

    /// Mean squared difference of two same-shaped tensors, as a scalar.
    pub fn mean_square_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean_all(sq)
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// gradient-tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            let node = &self.nodes[id];
            if matches!(node.op, Op::Input) {
                grads[id] = Some(g);
                continue;
            }
            let input_grads = self.op_backward(&node.op, &node.value, &g)?;
            for (var, ig) in node.op.inputs().into_iter().zip(input_grads) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(existing) => {
                        *existing = existing.add(&ig)?;
                    }
                    slot => *slot = Some(ig),
                }
            }
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn op_backward(&self, op: &Op, out: &Tensor<S>, g: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let res = match op {
            Op::Input => vec![],
            Op::Add(..) => vec![g.clone(), g.clone()],
            Op::Sub(..) => vec![g.clone(), g.scale(-S::one())],
            Op::Mul(a, b) => vec![g.zip_map(val(b), |x, y| x * y)?, g.zip_map(val(a), |x, y| x * y)?],
            Op::Scale(_, c) => vec![g.scale(S::of(*c))],
            Op::AddScalar(..) => vec![g.clone()],
            Op::Matmul(a, b) => {
                let at = transpose_data(val(a));
                let bt = transpose_data(val(b));
                vec![matmul_data(g, &bt), matmul_data(&at, g)]
            }
            Op::Transpose(_) => vec![transpose_data(g)],
            Op::Softmax(_, axis) => {
                // dx = y * (g - sum(g * y)) along axis
                let gy = g.zip_map(out, |x, y| x * y)?;
                let dx = axis_apply_pair(out, &gy, g, *axis, |y_lane, gy_lane, g_lane, out_lane| {
                    let s: S = gy_lane.iter().cloned().sum();
                    for i in 0..y_lane.len() {
                        out_lane[i] = y_lane[i] * (g_lane[i] - s);
                    }
                });
                vec![dx]
            }
            Op::Exp(_) => vec![g.zip_map(out, |x, y| x * y)?],
            Op::Ln(a) => vec![g.zip_map(val(a), |x, v| x / v)?],
            Op::Square(a) => vec![g.zip_map(val(a), |x, v| S::of(2.0) * x * v)?],
            Op::Gelu(a) => vec![g.zip_map(val(a), |x, v| x * gelu_derivative(v))?],
            Op::ConcatRows(parts) => {
                let cols = out.cols();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let rows = val(p).rows();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    res.push(Tensor::new(vec![rows, cols], data)?);
                    offset += rows;
                }
                res
            }
            Op::SliceRows(a, start, _) => {
                let av = val(a);
                let cols = av.cols();
                let mut dx = Tensor::zeros(av.shape());
                dx.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                vec![dx]
            }
            Op::SliceCols(a, start, end) => {
                let av = val(a);
                let cols = av.cols();
                let width = end - start;
                let mut dx = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    for c in 0..width {
                        dx.data_mut()[r * cols + start + c] = g.data()[r * width + c];
                    }
                }
                vec![dx]
            }
            Op::Reshape(a) => vec![g.reshaped(val(a).shape().to_vec())?],
            Op::TopkMask(..) => {
                // Kept positions are exactly the nonzero outputs, except a
                // kept zero input; recompute the mask from forward values.
                let mask = topk_kept_mask(out);
                let data = g
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &keep)| if keep { gv } else { S::zero() })
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), data)?]
            }
            Op::MeanAll(a) => {
                let av = val(a);
                let gs = g.scalar_value()? / S::of(av.numel() as f64);
                vec![Tensor::full(av.shape(), gs)]
            }
            Op::SumAll(a) => {
                let gs = g.scalar_value()?;
                vec![Tensor::full(val(a).shape(), gs)]
            }
            Op::AddRowBroadcast(x, b) => {
                let cols = val(x).cols();
                let mut db = Tensor::zeros(val(b).shape());
                for (i, &gv) in g.data().iter().enumerate() {
                    db.data_mut()[i % cols] += gv;
                }
                vec![g.clone(), db]
            }
            Op::MulColBroadcast(x, c) => {
                let xv = val(x);
                let cv = val(c);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dc = Tensor::zeros(cv.shape());
                for (i, &gv) in g.data().iter().enumerate() {
                    let row = i / cols;
                    dx.data_mut()[i] = gv * cv.data()[row];
                    dc.data_mut()[row] += gv * xv.data()[i];
                }
                vec![dx, dc]
            }
            Op::SubOuter(a, b) => {
                let (n, m) = (val(a).shape()[0], val(b).shape()[0]);
                let mut da = Tensor::zeros(&[n]);
                let mut db = Tensor::zeros(&[m]);
                for i in 0..n {
                    for j in 0..m {
                        let gv = g.data()[i * m + j];
                        da.data_mut()[i] += gv;
                        db.data_mut()[j] -= gv;
                    }
                }
                vec![da, db]
            }
            Op::LayerNorm(x, gamma, _) => {
                let xv = val(x);
                let gv = val(gamma);
                let (rows, cols) = (xv.rows(), xv.cols());
                let eps = S::of(LAYER_NORM_EPS);
                let ncols = S::of(cols as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = Tensor::zeros(&[cols]);
                let mut dbeta = Tensor::zeros(&[cols]);
                for r in 0..rows {
                    let row = xv.row(r);
                    let (mean, inv_std) = row_moments(row, eps);
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    let mut xhat = vec![S::zero(); cols];
                    let mut dxhat = vec![S::zero(); cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * inv_std;
                        dxhat[c] = grow[c] * gv.data()[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat[c];
                        dgamma.data_mut()[c] += grow[c] * xhat[c];
                        dbeta.data_mut()[c] += grow[c];
                    }
                    let mean_dxhat = sum_dxhat / ncols;
                    let mean_dxhat_xhat = sum_dxhat_xhat / ncols;
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] =
                            (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv_std;
                    }
                }
                vec![dx, dgamma, dbeta]
            }
            Op::LogsumexpRows(a) => {
                let av = val(a);
                let cols = av.cols();
                let mut dx = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = gr * (av.get2(r, c) - lse).exp();
                    }
                }
                vec![dx]
            }
            Op::NormalizeRows(a) => {
                let av = val(a);
                let cols = av.cols();
                let mut dx = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let row = av.row(r);
                    let norm = row_norm(row);
                    let yrow = &out.data()[r * cols..(r + 1) * cols];
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let dot: S = yrow.iter().zip(grow.iter()).map(|(&y, &gq)| y * gq).sum();
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = (grow[c] - yrow[c] * dot) / norm;
                    }
                }
                vec![dx]
            }
            Op::GatherRows(a, indices) => {
                let av = val(a);
                let cols = av.cols();
                let mut dx = Tensor::zeros(av.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dx.data_mut()[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                vec![dx]
            }
            Op::ScatterRows(a, indices, _) => {
                let av = val(a);
                let cols = av.cols();
                let mut dx = Tensor::zeros(av.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = g.data()[i * cols + c];
                    }
                }
                vec![dx]
            }
        };
        Ok(res)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::of(row.len() as f64);
    let mean = row.iter().cloned().sum::<S>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / n;
    (mean, (var + eps).sqrt().recip())
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    let sq: S = row.iter().map(|&v| v * v).sum();
    sq.sqrt().max(S::of(1e-12))
}

fn matmul_data<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![S::zero(); n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

fn transpose_data<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out).expect("transpose shape")
}

fn gelu_forward<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654); // sqrt(2/pi)
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654);
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let three = S::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// Apply `f` independently to each lane along `axis`.
fn axis_apply<S: Scalar>(
    t: &Tensor<S>,
    axis: usize,
    f: impl Fn(&[S], &mut [S]),
) -> Tensor<S> {
    let shape = t.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![S::zero(); t.numel()];
    let mut lane = vec![S::zero(); extent];
    let mut lane_out = vec![S::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for e in 0..extent {
                lane[e] = t.data()[base + e * inner];
            }
            f(&lane, &mut lane_out);
            for e in 0..extent {
                out[base + e * inner] = lane_out[e];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("axis_apply shape")
}

/// Lane-wise combination of three equally shaped tensors along `axis`.
fn axis_apply_pair<S: Scalar>(
    y: &Tensor<S>,
    gy: &Tensor<S>,
    g: &Tensor<S>,
    axis: usize,
    f: impl Fn(&[S], &[S], &[S], &mut [S]),
) -> Tensor<S> {
    let shape = y.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![S::zero(); y.numel()];
    let mut ly = vec![S::zero(); extent];
    let mut lgy = vec![S::zero(); extent];
    let mut lg = vec![S::zero(); extent];
    let mut lo = vec![S::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for e in 0..extent {
                ly[e] = y.data()[base + e * inner];
                lgy[e] = gy.data()[base + e * inner];
                lg[e] = g.data()[base + e * inner];
            }
            f(&ly, &lgy, &lg, &mut lo);
            for e in 0..extent {
                out[base + e * inner] = lo[e];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("axis_apply_pair shape")
}

fn topk_mask_data<S: Scalar>(t: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let shape = t.shape();
    if shape.is_empty() {
        return Err(CoreError::contract("topk_mask needs at least one axis"));
    }
    let extent = *shape.last().unwrap();
    if k == 0 || k > extent {
        return Err(CoreError::contract(format!(
            "topk_mask k={k} out of range for last-axis extent {extent}"
        )));
    }
    let slices = t.numel() / extent;
    let mut out = vec![S::zero(); t.numel()];
    let mut order: Vec<usize> = Vec::with_capacity(extent);
    for s in 0..slices {
        let base = s * extent;
        let lane = &t.data()[base..base + extent];
        order.clear();
        order.extend(0..extent);
        // Descending by value, ties toward the lowest index.
        order.sort_by(|&a, &b| {
            lane[b]
                .partial_cmp(&lane[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(k) {
            out[base + idx] = lane[idx];
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Recover the kept-position mask of a topk output. Exact zeros that were
/// kept are indistinguishable from masked entries, which only matters when
/// an input is exactly 0.0; gradient there is zero either way for the
/// downstream uses (gates are softmax outputs, strictly positive).
fn topk_kept_mask<S: Scalar>(out: &Tensor<S>) -> Vec<bool> {
    out.data().iter().map(|&v| v != S::zero()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    #[test]
    fn eager_values_available() {
        let mut g = G::new();
        let a = g
            .input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false)
            .unwrap();
        let b = g.scale(a, 2.0).unwrap();
        assert_eq!(g.value(b).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn matmul_known_value() {
        let mut g = G::new();
        let a = g
            .input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false)
            .unwrap();
        let b = g
            .input(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap(), false)
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn scalar_loss_gradient_analytic() {
        // loss = mean((x - c)^2) with scalar x: gradient 2(x - c).
        let mut g = G::new();
        let x = g.input(Tensor::scalar(3.0), true).unwrap();
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        let loss = g.mean_square_error(x, c).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.grad(x).scalar_value().unwrap();
        assert!((gx - 4.0).abs() < 1e-12, "expected 2(3-1)=4, got {gx}");
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = G::new();
        let x = g.input(Tensor::scalar(3.0), true).unwrap();
        let p = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), true).unwrap();
        let loss = g.square(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = G::new();
        let x = g
            .input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), true)
            .unwrap();
        assert!(matches!(g.backward(x), Err(CoreError::Contract(_))));
    }

    #[test]
    fn nan_failure_names_operation() {
        let mut g = G::new();
        let x = g.input(Tensor::scalar(-1.0), true).unwrap();
        let err = g.ln(x).unwrap_err();
        match err {
            CoreError::Numeric { op, .. } => assert_eq!(op, "ln"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn softmax_constant_vector_uniform() {
        let mut g = G::new();
        let x = g
            .input(Tensor::from_rows(&[vec![2.5, 2.5, 2.5, 2.5]]).unwrap(), false)
            .unwrap();
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ln3_value() {
        let mut g = G::new();
        let x = g
            .input(Tensor::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap(), false)
            .unwrap();
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let vals = vec![0.3, -1.2, 4.0, 0.7];
        let mut g = G::new();
        let x = g.input(Tensor::from_rows(&[vals.clone()]).unwrap(), false).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 100.0).collect();
        let xs = g.input(Tensor::from_rows(&[shifted]).unwrap(), false).unwrap();
        let ys = g.softmax(xs, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_mask_examples() {
        let mut g = G::new();
        // unique max
        let x = g
            .input(Tensor::from_rows(&[vec![0.1, 0.7, 0.2]]).unwrap(), false)
            .unwrap();
        let y = g.topk_mask(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.7, 0.0]);
        // k = extent keeps everything
        let y_all = g.topk_mask(x, 3).unwrap();
        assert_eq!(g.value(y_all).data(), &[0.1, 0.7, 0.2]);
        // tie broken toward the lowest index
        let t = g
            .input(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap(), false)
            .unwrap();
        let yt = g.topk_mask(t, 1).unwrap();
        assert_eq!(g.value(yt).data(), &[0.5, 0.0]);
        // out-of-range k rejected
        assert!(g.topk_mask(x, 4).is_err());
        assert!(g.topk_mask(x, 0).is_err());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = G::new();
        let a = g
            .input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), false)
            .unwrap();
        let b = g
            .input(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(), false)
            .unwrap();
        let cat = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2]);
        let back = g.slice_rows(cat, 1, 3).unwrap();
        assert_eq!(g.value(back).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let mut g = G::new();
        let x = g
            .input(
                Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
                true,
            )
            .unwrap();
        let picked = g.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0]);
        let spread = g.scatter_rows(picked, &[2, 0], 3).unwrap();
        let loss = g.sum_all(spread).unwrap();
        let grads = g.backward(loss).unwrap();
        // row 1 never selected: zero gradient there, ones elsewhere
        assert_eq!(grads.grad(x).data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
