//! Reverse-mode differentiation over a linear tape.
//!
//! A forward pass records one node per operation; `backward` walks the tape
//! in reverse and accumulates vector-Jacobian products. The op set is exactly
//! what the encoder, the relevance modules, and the three training losses
//! need — nothing speculative.
//!
//! All loops run in a fixed order, so a given graph produces bitwise
//! identical values and gradients on every evaluation.

use std::collections::BTreeMap;

use crate::error::{DdrError, Result};
use crate::numerics::softmax::{cross_entropy_row, softmax_row};
use crate::numerics::{GradMap, ParamSet, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    /// Row selection: `rows[i]` picks row i of the output from the input.
    Gather { input: Var, rows: Vec<usize> },
    Add(Var, Var),
    /// Matrix plus a broadcast row (bias).
    AddRow { mat: Var, row: Var },
    Scale { x: Var, factor: F },
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    /// Row-wise layer norm with learned scale/offset.
    LayerNorm { x: Var, gamma: Var, beta: Var },
    /// Row-wise softmax; masked columns get probability exactly 0.
    SoftmaxRows { x: Var },
    /// Mean over the unmasked rows, yielding a single row.
    MeanRows { x: Var, row_mask: Vec<bool> },
    /// Row-wise L2 normalization.
    NormalizeRows(Var),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Elementwise sum of same-shaped inputs.
    SumN(Vec<Var>),
    Dot(Var, Var),
    /// Mean cross entropy over rows of a logit matrix.
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recorded computation graph.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for every parameter, in sorted name order.
    pub fn bind(&mut self, params: &ParamSet<F>) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, p)| (name.to_string(), self.leaf(p.tensor.clone())))
            .collect()
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn gather(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let (n, c) = (t.rows(), t.cols());
        if rows.is_empty() {
            return Err(DdrError::Shape("gather with no rows".to_string()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(DdrError::Shape(format!(
                "gather row {bad} out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = tensor2(rows.len(), c, data);
        Ok(self.push(
            value,
            Op::Gather {
                input,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DdrError::Shape(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let mut value = Tensor::zeros(ta.shape());
        value.data_mut().copy_from_slice(&data);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(mat), self.value(row));
        let (n, c) = (tm.rows(), tm.cols());
        if tr.numel() != c {
            return Err(DdrError::Shape(format!(
                "add_row: matrix has {c} cols, row has {} elements",
                tr.numel()
            )));
        }
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for (j, &r) in tr.data().iter().enumerate() {
                data.push(tm.row(i)[j] + r);
            }
        }
        let value = tensor2(n, c, data);
        Ok(self.push(value, Op::AddRow { mat, row }))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let t = self.value(x);
        let data: Vec<F> = t.data().iter().map(|&v| v * factor).collect();
        let mut value = Tensor::zeros(t.shape());
        value.data_mut().copy_from_slice(&data);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DdrError::Shape(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let mut value = Tensor::zeros(ta.shape());
        value.data_mut().copy_from_slice(&data);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(DdrError::Shape(format!(
                "matmul [{m}x{k}] @ [{k2}x{n}]"
            )));
        }
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        Ok(self.push(tensor2(m, n, data), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let data = transpose_data(t.data(), n, c);
        self.push(tensor2(c, n, data), Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<F> = t
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let mut value = Tensor::zeros(t.shape());
        value.data_mut().copy_from_slice(&data);
        self.push(value, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<F> = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let mut value = Tensor::zeros(t.shape());
        value.data_mut().copy_from_slice(&data);
        self.push(value, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = (tx.rows(), tx.cols());
        if tg.numel() != c || tb.numel() != c {
            return Err(DdrError::Shape(format!(
                "layer_norm over {c} cols with gamma {} / beta {}",
                tg.numel(),
                tb.numel()
            )));
        }
        let eps = F::from_f64(LAYER_NORM_EPS);
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = tx.row(i);
            let (mean, sigma) = row_moments(row, eps);
            for j in 0..c {
                let xhat = (row[j] - mean) / sigma;
                data.push(tg.data()[j] * xhat + tb.data()[j]);
            }
        }
        Ok(self.push(tensor2(n, c, data), Op::LayerNorm { x, gamma, beta }))
    }

    /// Row softmax. `col_mask[j] = false` forces probability 0 in column j.
    pub fn softmax_rows(&mut self, x: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if let Some(mask) = col_mask {
            if mask.len() != c {
                return Err(DdrError::Shape(format!(
                    "softmax mask has {} entries for {c} cols",
                    mask.len()
                )));
            }
            if mask.iter().all(|&m| !m) {
                return Err(DdrError::Invalid(
                    "softmax with every column masked".to_string(),
                ));
            }
        }
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = t.row(i);
            match col_mask {
                None => data.extend(softmax_row(row)),
                Some(mask) => {
                    let max = row
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|(&v, _)| v)
                        .fold(F::neg_infinity(), |acc, v| if v > acc { v } else { acc });
                    let exps: Vec<F> = row
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| if m { (v - max).exp() } else { F::zero() })
                        .collect();
                    let sum = exps.iter().fold(F::zero(), |acc, &v| acc + v);
                    data.extend(exps.into_iter().map(|e| e / sum));
                }
            }
        }
        Ok(self.push(tensor2(n, c, data), Op::SoftmaxRows { x }))
    }

    /// Mean over the rows where `row_mask` is true, producing shape `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var, row_mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if row_mask.len() != n {
            return Err(DdrError::Shape(format!(
                "mean_rows mask has {} entries for {n} rows",
                row_mask.len()
            )));
        }
        let count = row_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DdrError::Invalid("mean_rows with every row masked".to_string()));
        }
        let inv = F::one() / F::from_usize(count);
        let mut acc = vec![F::zero(); c];
        for i in 0..n {
            if row_mask[i] {
                for (j, &v) in t.row(i).iter().enumerate() {
                    acc[j] += v;
                }
            }
        }
        for v in &mut acc {
            *v *= inv;
        }
        Ok(self.push(
            tensor2(1, c, acc),
            Op::MeanRows {
                x,
                row_mask: row_mask.to_vec(),
            },
        ))
    }

    /// L2-normalize every row. Errors on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = t.row(i);
            let norm = l2_norm(row);
            if norm == F::zero() {
                return Err(DdrError::Numeric(format!(
                    "normalize_rows: row {i} has zero norm"
                )));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        Ok(self.push(tensor2(n, c, data), Op::NormalizeRows(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if start + len > c || len == 0 {
            return Err(DdrError::Shape(format!(
                "slice_cols [{start}, {}) of {c} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(tensor2(n, len, data), Op::SliceCols { x, start, len }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DdrError::Shape("concat_rows of nothing".to_string()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(DdrError::Shape(format!(
                    "concat_rows: {} cols vs {c}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(tensor2(rows, c, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DdrError::Shape("concat_cols of nothing".to_string()));
        }
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != n {
                    return Err(DdrError::Shape(format!(
                        "concat_cols: {} rows vs {n}",
                        t.rows()
                    )));
                }
                data.extend_from_slice(t.row(i));
            }
        }
        Ok(self.push(tensor2(n, total, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DdrError::Shape("sum_n of nothing".to_string()));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let mut acc = vec![F::zero(); self.value(parts[0]).numel()];
        for &p in parts {
            let t = self.value(p);
            if t.shape() != shape.as_slice() {
                return Err(DdrError::Shape(format!(
                    "sum_n: {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let mut value = Tensor::zeros(&shape);
        value.data_mut().copy_from_slice(&acc);
        Ok(self.push(value, Op::SumN(parts.to_vec())))
    }

    /// Inner product of two equal-length tensors, yielding a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(DdrError::Shape(format!(
                "dot of {} vs {} elements",
                ta.numel(),
                tb.numel()
            )));
        }
        let sum = ta
            .data()
            .iter()
            .zip(tb.data())
            .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        Ok(self.push(Tensor::scalar(sum), Op::Dot(a, b)))
    }

    /// Mean softmax cross entropy over logit rows.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(DdrError::Shape(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(DdrError::Invalid(format!(
                "target {bad} out of range for {c} classes"
            )));
        }
        let mut total = F::zero();
        for (i, &target) in targets.iter().enumerate() {
            total += cross_entropy_row(t.row(i), target);
        }
        let mean = total / F::from_usize(n);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradient of a scalar `loss` with respect to every node at or before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(DdrError::Shape(format!(
                "backward from non-scalar {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(DdrError::Numeric("loss is not finite".to_string()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), F::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Gather { input, rows } => {
                let c = self.value(*input).cols();
                let dst = slot(grads, *input, self.value(*input).shape());
                for (i, &r) in rows.iter().enumerate() {
                    let grow = g.row(i);
                    let drow = &mut dst.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        drow[j] += grow[j];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.shape()), g.data());
                add_into(slot(grads, *b, g.shape()), g.data());
            }
            Op::AddRow { mat, row } => {
                add_into(slot(grads, *mat, g.shape()), g.data());
                let c = g.cols();
                let dst = slot(grads, *row, self.value(*row).shape());
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    for j in 0..c {
                        dst.data_mut()[j] += grow[j];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let dst = slot(grads, *x, g.shape());
                for (d, &gv) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += gv * *factor;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                {
                    let dst = slot(grads, *a, g.shape());
                    for ((d, &gv), &bv) in dst.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                let dst = slot(grads, *b, g.shape());
                for ((d, &gv), &av) in dst.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    *d += gv * av;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                // dA = g @ B^T
                let da = matmul_nt(g.data(), tb.data(), m, n, k);
                add_into(slot(grads, *a, ta.shape()), &da);
                // dB = A^T @ g
                let db = matmul_tn(ta.data(), g.data(), m, k, n);
                add_into(slot(grads, *b, tb.shape()), &db);
            }
            Op::Transpose(x) => {
                let (n, c) = (g.rows(), g.cols());
                let dx = transpose_data(g.data(), n, c);
                add_into(slot(grads, *x, self.value(*x).shape()), &dx);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let dst = slot(grads, *x, tx.shape());
                for ((d, &gv), &xv) in dst.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                    if xv > F::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let dst = slot(grads, *x, tx.shape());
                for ((d, &gv), &xv) in dst.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                    *d += gv * gelu_bwd(xv);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let (n, c) = (tx.rows(), tx.cols());
                let eps = F::from_f64(LAYER_NORM_EPS);
                let inv_c = F::one() / F::from_usize(c);
                let mut dx = vec![F::zero(); n * c];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..n {
                    let row = tx.row(i);
                    let grow = g.row(i);
                    let (mean, sigma) = row_moments(row, eps);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) / sigma;
                        let dyhat = grow[j] * tg.data()[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        m1 += dyhat;
                        m2 += dyhat * xhat;
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        let xhat = (row[j] - mean) / sigma;
                        let dyhat = grow[j] * tg.data()[j];
                        dx[i * c + j] = (dyhat - m1 - xhat * m2) / sigma;
                    }
                }
                add_into(slot(grads, *x, tx.shape()), &dx);
                add_into(slot(grads, *gamma, self.value(*gamma).shape()), &dgamma);
                add_into(slot(grads, *beta, self.value(*beta).shape()), &dbeta);
            }
            Op::SoftmaxRows { x } => {
                // p is the stored output; masked columns have p = 0, so their
                // gradient vanishes without special casing.
                let p = &node.value;
                let (n, c) = (p.rows(), p.cols());
                let mut dx = vec![F::zero(); n * c];
                for i in 0..n {
                    let prow = p.row(i);
                    let grow = g.row(i);
                    let inner = prow
                        .iter()
                        .zip(grow)
                        .fold(F::zero(), |acc, (&pv, &gv)| acc + pv * gv);
                    for j in 0..c {
                        dx[i * c + j] = prow[j] * (grow[j] - inner);
                    }
                }
                add_into(slot(grads, *x, self.value(*x).shape()), &dx);
            }
            Op::MeanRows { x, row_mask } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let count = row_mask.iter().filter(|&&m| m).count();
                let inv = F::one() / F::from_usize(count);
                let dst = slot(grads, *x, tx.shape());
                for (i, &m) in row_mask.iter().enumerate() {
                    if m {
                        let drow = &mut dst.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] += g.data()[j] * inv;
                        }
                    }
                }
            }
            Op::NormalizeRows(x) => {
                let tx = self.value(*x);
                let y = &node.value;
                let (n, c) = (tx.rows(), tx.cols());
                let mut dx = vec![F::zero(); n * c];
                for i in 0..n {
                    let xrow = tx.row(i);
                    let yrow = y.row(i);
                    let grow = g.row(i);
                    let norm = l2_norm(xrow);
                    let gy = yrow
                        .iter()
                        .zip(grow)
                        .fold(F::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..c {
                        dx[i * c + j] = (grow[j] - gy * yrow[j]) / norm;
                    }
                }
                add_into(slot(grads, *x, tx.shape()), &dx);
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let dst = slot(grads, *x, tx.shape());
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    let drow = &mut dst.data_mut()[i * c + start..i * c + start + len];
                    for j in 0..*len {
                        drow[j] += grow[j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let rows = tp.rows();
                    let chunk = &g.data()[offset..offset + rows * tp.cols()];
                    add_into(slot(grads, p, tp.shape()), chunk);
                    offset += rows * tp.cols();
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut start = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let pc = tp.cols();
                    let dst = slot(grads, p, tp.shape());
                    for i in 0..n {
                        let grow = &g.row(i)[start..start + pc];
                        let drow = &mut dst.data_mut()[i * pc..(i + 1) * pc];
                        for j in 0..pc {
                            drow[j] += grow[j];
                        }
                    }
                    start += pc;
                }
            }
            Op::SumN(parts) => {
                for &p in parts {
                    add_into(slot(grads, p, g.shape()), g.data());
                }
            }
            Op::Dot(a, b) => {
                let g0 = g.item();
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                {
                    let dst = slot(grads, *a, ta.shape());
                    for (d, &bv) in dst.data_mut().iter_mut().zip(tb.data()) {
                        *d += g0 * bv;
                    }
                }
                let dst = slot(grads, *b, tb.shape());
                for (d, &av) in dst.data_mut().iter_mut().zip(ta.data()) {
                    *d += g0 * av;
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let tl = self.value(*logits);
                let (n, c) = (tl.rows(), tl.cols());
                let scale = g.item() / F::from_usize(n);
                let dst = slot(grads, *logits, tl.shape());
                for (i, &target) in targets.iter().enumerate() {
                    let probs = softmax_row(tl.row(i));
                    let drow = &mut dst.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        let indicator = if j == target { F::one() } else { F::zero() };
                        drow[j] += (probs[j] - indicator) * scale;
                    }
                }
            }
        }
    }
}

/// Gradients indexed by tape variable.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient map for a set of bound parameters. Parameters that never
    /// entered the graph get a zero gradient of their own shape.
    pub fn to_map(
        &self,
        binding: &BTreeMap<String, Var>,
        params: &ParamSet<F>,
    ) -> Result<GradMap<F>> {
        let mut out = GradMap::new();
        for (name, var) in binding {
            let grad = match self.get(*var) {
                Some(t) => t.clone(),
                None => Tensor::zeros(params.tensor(name)?.shape()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

fn tensor2<F: Scalar>(rows: usize, cols: usize, data: Vec<F>) -> Tensor<F> {
    let mut t = Tensor::zeros(&[rows, cols]);
    t.data_mut().copy_from_slice(&data);
    t
}

fn slot<'a, F: Scalar>(
    grads: &'a mut [Option<Tensor<F>>],
    var: Var,
    shape: &[usize],
) -> &'a mut Tensor<F> {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<F: Scalar>(dst: &mut Tensor<F>, src: &[F]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

fn l2_norm<F: Scalar>(row: &[F]) -> F {
    row.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt()
}

fn row_moments<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_usize(row.len());
    let mean = row.iter().fold(F::zero(), |acc, &v| acc + v) / n;
    let var = row
        .iter()
        .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
        / n;
    (mean, (var + eps).sqrt())
}

/// C[m,n] = A[m,k] @ B[k,n], row-major, ikj loop order.
pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] @ B[k,n]^T (rows of A against rows of B).
fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T @ B[m,n].
fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_data<F: Scalar>(data: &[F], n: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            out[j * n + i] = data[i * c + j];
        }
    }
    out
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let coef = F::from_f64(GELU_COEF);
    let k = F::from_f64(SQRT_2_OVER_PI);
    let u = k * (x + coef * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let coef = F::from_f64(GELU_COEF);
    let three = F::from_f64(3.0);
    let k = F::from_f64(SQRT_2_OVER_PI);
    let u = k * (x + coef * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * coef * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, seeded};

    fn leafed(tape: &mut Tape<f64>, shape: &[usize], seed: u64) -> Var {
        tape.leaf(normal_tensor(shape, 1.0, &mut seeded(seed)))
    }

    /// Central-difference check of one op built by `f` over leaf inputs.
    fn check_op(
        shapes: &[&[usize]],
        seed: u64,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let base: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| normal_tensor(s, 1.0, &mut seeded(seed + i as u64)))
            .collect();

        // analytic
        let mut tape = Tape::new();
        let vars: Vec<Var> = base.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        // reduce to scalar via dot with fixed weights
        let w = tape.leaf(normal_tensor(
            tape.value(out).shape(),
            1.0,
            &mut seeded(seed + 999),
        ));
        let loss = tape.dot(out, w).unwrap();
        let grads = tape.backward(loss).unwrap();

        let eps = 1e-6;
        let mut max_rel: f64 = 0.0;
        for (ti, t) in base.iter().enumerate() {
            let analytic = grads.get(vars[ti]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut inputs = base.clone();
                    inputs[ti].data_mut()[i] += delta;
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
                    let out = f(&mut tape, &vars);
                    let w = tape.leaf(normal_tensor(
                        tape.value(out).shape(),
                        1.0,
                        &mut seeded(seed + 999),
                    ));
                    let loss = tape.dot(out, w).unwrap();
                    tape.value(loss).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let rel = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
        max_rel
    }

    #[test]
    fn grad_matmul() {
        let err = check_op(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]).unwrap());
        assert!(err < 1e-7, "matmul grad err {err}");
    }

    #[test]
    fn grad_add_mul_scale() {
        let err = check_op(&[&[3, 3], &[3, 3]], 2, |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let m = t.mul(s, v[0]).unwrap();
            t.scale(m, 0.7)
        });
        assert!(err < 1e-7, "add/mul/scale grad err {err}");
    }

    #[test]
    fn grad_add_row_and_slice() {
        let err = check_op(&[&[3, 6], &[6]], 3, |t, v| {
            let s = t.add_row(v[0], v[1]).unwrap();
            t.slice_cols(s, 2, 3).unwrap()
        });
        assert!(err < 1e-7, "add_row/slice grad err {err}");
    }

    #[test]
    fn grad_activations() {
        let err = check_op(&[&[4, 4]], 4, |t, v| {
            let r = t.gelu(v[0]);
            t.relu(r)
        });
        assert!(err < 1e-6, "activation grad err {err}");
    }

    #[test]
    fn grad_layer_norm() {
        let err = check_op(&[&[3, 5], &[5], &[5]], 5, |t, v| {
            t.layer_norm(v[0], v[1], v[2]).unwrap()
        });
        assert!(err < 1e-6, "layer_norm grad err {err}");
    }

    #[test]
    fn grad_softmax_masked() {
        let mask = vec![true, true, false, true];
        let err = check_op(&[&[2, 4]], 6, move |t, v| {
            t.softmax_rows(v[0], Some(&mask)).unwrap()
        });
        assert!(err < 1e-7, "softmax grad err {err}");
    }

    #[test]
    fn grad_mean_and_normalize() {
        let mask = vec![true, false, true];
        let err = check_op(&[&[3, 4]], 7, move |t, v| {
            let m = t.mean_rows(v[0], &mask).unwrap();
            t.normalize_rows(m).unwrap()
        });
        assert!(err < 1e-7, "mean/normalize grad err {err}");
    }

    #[test]
    fn grad_gather_concat() {
        let err = check_op(&[&[4, 3], &[2, 3]], 8, |t, v| {
            let g = t.gather(v[0], &[1, 1, 3]).unwrap();
            let c = t.concat_rows(&[g, v[1]]).unwrap();
            t.concat_cols(&[c, c]).unwrap()
        });
        assert!(err < 1e-7, "gather/concat grad err {err}");
    }

    #[test]
    fn grad_transpose_dot_sum() {
        let err = check_op(&[&[3, 2], &[3, 2]], 9, |t, v| {
            let tr = t.transpose(v[0]);
            let back = t.transpose(tr);
            t.sum_n(&[back, v[1]]).unwrap()
        });
        assert!(err < 1e-7, "transpose/sum grad err {err}");
    }

    #[test]
    fn grad_cross_entropy_rows() {
        // scalar output already; check directly without dot-reduction
        let base = normal_tensor::<f64>(&[3, 5], 1.0, &mut seeded(10));
        let targets = vec![0, 3, 2];
        let mut tape = Tape::new();
        let v = tape.leaf(base.clone());
        let loss = tape.cross_entropy_rows(v, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(v).unwrap().clone();

        let eps = 1e-6;
        for i in 0..base.numel() {
            let eval = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                let mut tape = Tape::new();
                let v = tape.leaf(t);
                let loss = tape.cross_entropy_rows(v, &targets).unwrap();
                tape.value(loss).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let rel = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-7, "ce grad rel err {rel} at {i}");
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns_exactly() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[2, 4], 11);
        let p = tape
            .softmax_rows(x, Some(&[true, false, true, false]))
            .unwrap();
        for i in 0..2 {
            let row = tape.value(p).row(i);
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
            assert!((row[0] + row[2] - 1.0).abs() < 1e-6);
        }
    }

    fn leaf32(tape: &mut Tape<f32>, shape: &[usize], seed: u64) -> Var {
        tape.leaf(normal_tensor(shape, 1.0, &mut seeded(seed)))
    }

    #[test]
    fn backward_rejects_non_scalar_and_reports_unreached() {
        let mut tape = Tape::<f64>::new();
        let a = leafed(&mut tape, &[2, 2], 12);
        let b = leafed(&mut tape, &[2, 2], 13);
        assert!(tape.backward(a).is_err());
        let w = leafed(&mut tape, &[2, 2], 14);
        let loss = tape.dot(a, w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none(), "b is not upstream of loss");
    }

    #[test]
    fn shape_errors_surface() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, &[2, 3], 15);
        let b = leaf32(&mut tape, &[4, 2], 16);
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.gather(a, &[5]).is_err());
    }
}
