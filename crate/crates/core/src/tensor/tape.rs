use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

/// Element-level index remapping, used to express im2col-style restructuring.
/// `map[i]` gives the flat input index feeding output element `i`, or `None`
/// for positions that read implicit zero padding.
#[derive(Debug, Clone)]
pub struct IndexMapPlan {
    pub out_shape: Vec<usize>,
    pub map: Vec<Option<usize>>,
}

impl IndexMapPlan {
    pub fn new(out_shape: Vec<usize>, map: Vec<Option<usize>>) -> IndexMapPlan {
        assert_eq!(numel_of(&out_shape), map.len());
        IndexMapPlan { out_shape, map }
    }
}

enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    /// c - t
    RsubScalar,
    Sigmoid,
    Gelu,
    SoftmaxLastDim,
    Log,
    Clamp {
        lo: f64,
        hi: f64,
    },
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    Reshape,
    Transpose2d,
    GatherRows(Rc<Vec<usize>>),
    IndexMap(Rc<IndexMapPlan>),
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    AddRows,
    MulRows,
    LayerNorm,
}

struct Record {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
    /// Per-op saved activations beyond what inputs/outputs already hold
    /// (layer norm keeps its per-row inverse std here).
    saved: Vec<f64>,
}

/// Wengert tape: ops append records during the forward pass; `backward`
/// replays them in reverse, accumulating gradients into every
/// `requires_grad` ancestor of the loss. Records are only written when an
/// input requires grad, so constant subgraphs cost nothing.
///
/// One tape per training step; drop or `clear` it afterwards.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Record>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// [outer, extent, inner] factorization of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation, as used by the usual transformer stacks
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.records.borrow_mut().clear();
    }

    fn emit(&self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>, saved: Vec<f64>) -> Tensor {
        let needs_grad = inputs.iter().any(Tensor::requires_grad);
        let out = Tensor::raw(shape, data, needs_grad);
        if needs_grad {
            self.records.borrow_mut().push(Record {
                op,
                inputs,
                output: out.clone(),
                saved,
            });
        }
        out
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = a.data();
            let db = b.data();
            for i in 0..m {
                let arow = &da[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (t, &av) in arow.iter().enumerate() {
                    let brow = &db[t * n..(t + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        Ok(self.emit(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], out, vec![]))
    }

    // ── same-shape elementwise ─────────────────────────────────────

    fn binary(&self, op: Op, name: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.emit(op, vec![a.clone(), b.clone()], a.shape().to_vec(), data, vec![]))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Division by zero is not an error here; it produces non-finite values
    /// that `check_finite` flags downstream.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    // ── scalar broadcast ───────────────────────────────────────────

    fn unary_map(&self, op: Op, a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        self.emit(op, vec![a.clone()], a.shape().to_vec(), data, vec![])
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary_map(Op::AddScalar, a, |x| x + c)
    }

    pub fn sub_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary_map(Op::AddScalar, a, |x| x - c)
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary_map(Op::MulScalar(c), a, |x| x * c)
    }

    pub fn div_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary_map(Op::MulScalar(1.0 / c), a, |x| x / c)
    }

    /// c - t, elementwise.
    pub fn rsub_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary_map(Op::RsubScalar, a, |x| c - x)
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        self.mul_scalar(a, -1.0)
    }

    // ── activations ────────────────────────────────────────────────

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        self.unary_map(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn gelu(&self, a: &Tensor) -> Tensor {
        self.unary_map(Op::Gelu, a, gelu_scalar)
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::DomainError {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary_map(Op::Log, a, f64::ln))
    }

    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary_map(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    /// Softmax over the last dimension; rows sum to 1.
    pub fn softmax_lastdim(&self, a: &Tensor) -> Tensor {
        let shape = a.shape().to_vec();
        let cols = *shape.last().expect("softmax on rank-0 tensor");
        let mut data = a.to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.emit(Op::SoftmaxLastDim, vec![a.clone()], shape, data, vec![])
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        self.emit(Op::SumAll, vec![a.clone()], vec![1], vec![s], vec![])
    }

    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        let n = a.numel() as f64;
        let s: f64 = a.data().iter().sum();
        self.emit(Op::MeanAll, vec![a.clone()], vec![1], vec![s / n], vec![])
    }

    fn reduce_axis(&self, a: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::AxisOutOfRange { axis, rank: a.rank() });
        }
        let shape = a.shape();
        let (outer, extent, inner) = axis_split(shape, axis);
        let mut out = vec![0.0; outer * inner];
        {
            let d = a.data();
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= extent as f64;
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = if mean { Op::MeanAxis(axis) } else { Op::SumAxis(axis) };
        Ok(self.emit(op, vec![a.clone()], out_shape, out, vec![]))
    }

    pub fn sum_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce_axis(a, axis, true)
    }

    // ── restructuring ──────────────────────────────────────────────

    pub fn reshape(&self, a: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&new_shape) != a.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} elems) -> {:?}", a.shape(), a.numel(), new_shape),
            ));
        }
        let data = a.to_vec();
        Ok(self.emit(Op::Reshape, vec![a.clone()], new_shape, data, vec![]))
    }

    pub fn transpose2d(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose2d", format!("rank {} input", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let d = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        Ok(self.emit(Op::Transpose2d, vec![a.clone()], vec![n, m], out, vec![]))
    }

    /// Row lookup into a `[V, d]` table. Repeated ids accumulate gradient.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", format!("table rank {}", s.len())));
        }
        let (v, d) = (s[0], s[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, len: v });
            }
        }
        let td = table.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        Ok(self.emit(
            Op::GatherRows(Rc::new(ids.to_vec())),
            vec![table.clone()],
            vec![ids.len(), d],
            out,
            vec![],
        ))
    }

    pub fn index_map(&self, a: &Tensor, plan: &Rc<IndexMapPlan>) -> Result<Tensor> {
        let n = a.numel();
        if let Some(&Some(bad)) = plan.map.iter().find(|m| matches!(m, Some(i) if *i >= n)) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let d = a.data();
        let out: Vec<f64> = plan.map.iter().map(|m| m.map_or(0.0, |i| d[i])).collect();
        drop(d);
        Ok(self.emit(
            Op::IndexMap(plan.clone()),
            vec![a.clone()],
            plan.out_shape.clone(),
            out,
            vec![],
        ))
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {s:?}", start + len)));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = a.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        drop(d);
        Ok(self.emit(Op::SliceCols { start, len }, vec![a.clone()], vec![rows, len], out, vec![]))
    }

    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let rows = parts[0].shape()[0];
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != rows {
                return Err(shape_err("concat_cols", format!("row count mismatch: {:?}", p.shape())));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (p, d) in parts.iter().zip(&datas) {
                let c = p.shape()[1];
                out.extend_from_slice(&d[r * c..(r + 1) * c]);
            }
        }
        drop(datas);
        Ok(self.emit(Op::ConcatCols, parts.to_vec(), vec![rows, total], out, vec![]))
    }

    /// `[n, c] + [c]`, the bias pattern.
    pub fn add_rows(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (s, rs) = (a.shape(), row.shape());
        if s.len() != 2 || rs.len() != 1 || rs[0] != s[1] {
            return Err(shape_err("add_rows", format!("{s:?} + {rs:?}")));
        }
        let cols = s[1];
        let rd = row.data();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rd[i % cols])
            .collect();
        drop(rd);
        Ok(self.emit(Op::AddRows, vec![a.clone(), row.clone()], s.to_vec(), data, vec![]))
    }

    /// `[n, c] * [c]`, the gain pattern.
    pub fn mul_rows(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (s, rs) = (a.shape(), row.shape());
        if s.len() != 2 || rs.len() != 1 || rs[0] != s[1] {
            return Err(shape_err("mul_rows", format!("{s:?} * {rs:?}")));
        }
        let cols = s[1];
        let rd = row.data();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rd[i % cols])
            .collect();
        drop(rd);
        Ok(self.emit(Op::MulRows, vec![a.clone(), row.clone()], s.to_vec(), data, vec![]))
    }

    /// Normalize each row of the last dimension to zero mean, unit variance.
    /// Affine gain/bias are applied separately via `mul_rows`/`add_rows`.
    pub fn layer_norm(&self, a: &Tensor, eps: f64) -> Tensor {
        let shape = a.shape().to_vec();
        let cols = *shape.last().expect("layer_norm on rank-0 tensor");
        let mut data = a.to_vec();
        let mut inv_stds = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
            inv_stds.push(inv_std);
        }
        self.emit(Op::LayerNorm, vec![a.clone()], shape, data, inv_stds)
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a finite scalar loss. Gradients accumulate into
    /// every `requires_grad` tensor reachable from `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { value: v });
        }
        loss.accumulate_grad(&[1.0]);
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let Some(gout) = rec.output.grad() else { continue };
            backprop(rec, &gout);
        }
        Ok(())
    }
}

fn backprop(rec: &Record, gout: &[f64]) {
    match &rec.op {
        Op::Matmul => {
            let a = &rec.inputs[0];
            let b = &rec.inputs[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = dC . B^T
                let db = b.data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for t in 0..k {
                        let brow = &db[t * n..(t + 1) * n];
                        let mut acc = 0.0;
                        for (g, bv) in grow.iter().zip(brow) {
                            acc += g * bv;
                        }
                        ga[i * k + t] = acc;
                    }
                }
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                // dB = A^T . dC
                let da = a.data();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let arow = &da[i * k..(i + 1) * k];
                    let grow = &gout[i * n..(i + 1) * n];
                    for (t, &av) in arow.iter().enumerate() {
                        let dst = &mut gb[t * n..(t + 1) * n];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d += av * g;
                        }
                    }
                }
                b.accumulate_grad(&gb);
            }
        }
        Op::Add => {
            for input in &rec.inputs {
                if input.requires_grad() {
                    input.accumulate_grad(gout);
                }
            }
        }
        Op::Sub => {
            if rec.inputs[0].requires_grad() {
                rec.inputs[0].accumulate_grad(gout);
            }
            if rec.inputs[1].requires_grad() {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                rec.inputs[1].accumulate_grad(&neg);
            }
        }
        Op::Mul => {
            let (a, b) = (&rec.inputs[0], &rec.inputs[1]);
            if a.requires_grad() {
                let bd = b.data();
                let ga: Vec<f64> = gout.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
                drop(bd);
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let ad = a.data();
                let gb: Vec<f64> = gout.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
                drop(ad);
                b.accumulate_grad(&gb);
            }
        }
        Op::Div => {
            let (a, b) = (&rec.inputs[0], &rec.inputs[1]);
            let bd = b.to_vec();
            if a.requires_grad() {
                let ga: Vec<f64> = gout.iter().zip(&bd).map(|(g, y)| g / y).collect();
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let ad = a.data();
                let gb: Vec<f64> = gout
                    .iter()
                    .zip(ad.iter())
                    .zip(&bd)
                    .map(|((g, x), y)| -g * x / (y * y))
                    .collect();
                drop(ad);
                b.accumulate_grad(&gb);
            }
        }
        Op::AddScalar => rec.inputs[0].accumulate_grad(gout),
        Op::MulScalar(c) => {
            let ga: Vec<f64> = gout.iter().map(|g| g * c).collect();
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::RsubScalar => {
            let ga: Vec<f64> = gout.iter().map(|g| -g).collect();
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::Sigmoid => {
            // saves the output: dy/dx = y(1-y)
            let y = rec.output.data();
            let ga: Vec<f64> = gout.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
            drop(y);
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::Gelu => {
            let x = rec.inputs[0].data();
            let ga: Vec<f64> = gout.iter().zip(x.iter()).map(|(g, &x)| g * gelu_grad_scalar(x)).collect();
            drop(x);
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::SoftmaxLastDim => {
            let y = rec.output.data();
            let cols = *rec.output.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for (row, (yrow, grow)) in y.chunks(cols).zip(gout.chunks(cols)).enumerate() {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    ga[row * cols + j] = yrow[j] * (grow[j] - dot);
                }
            }
            drop(y);
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::Log => {
            let x = rec.inputs[0].data();
            let ga: Vec<f64> = gout.iter().zip(x.iter()).map(|(g, x)| g / x).collect();
            drop(x);
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::Clamp { lo, hi } => {
            let x = rec.inputs[0].data();
            let ga: Vec<f64> = gout
                .iter()
                .zip(x.iter())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect();
            drop(x);
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::SumAll => {
            let ga = vec![gout[0]; rec.inputs[0].numel()];
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::MeanAll => {
            let n = rec.inputs[0].numel();
            let ga = vec![gout[0] / n as f64; n];
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::SumAxis(axis) | Op::MeanAxis(axis) => {
            let input = &rec.inputs[0];
            let (outer, extent, inner) = axis_split(input.shape(), *axis);
            let scale = if matches!(rec.op, Op::MeanAxis(_)) {
                1.0 / extent as f64
            } else {
                1.0
            };
            let mut ga = vec![0.0; input.numel()];
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    for i in 0..inner {
                        ga[base + i] = gout[o * inner + i] * scale;
                    }
                }
            }
            input.accumulate_grad(&ga);
        }
        Op::Reshape => rec.inputs[0].accumulate_grad(gout),
        Op::Transpose2d => {
            let out_shape = rec.output.shape();
            let (n, m) = (out_shape[0], out_shape[1]);
            let mut ga = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    ga[j * n + i] = gout[i * m + j];
                }
            }
            rec.inputs[0].accumulate_grad(&ga);
        }
        Op::GatherRows(ids) => {
            let table = &rec.inputs[0];
            let d = table.shape()[1];
            let mut ga = vec![0.0; table.numel()];
            for (r, &id) in ids.iter().enumerate() {
                let src = &gout[r * d..(r + 1) * d];
                let dst = &mut ga[id * d..(id + 1) * d];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            table.accumulate_grad(&ga);
        }
        Op::IndexMap(plan) => {
            let input = &rec.inputs[0];
            let mut ga = vec![0.0; input.numel()];
            for (g, m) in gout.iter().zip(&plan.map) {
                if let Some(i) = m {
                    ga[*i] += g;
                }
            }
            input.accumulate_grad(&ga);
        }
        Op::SliceCols { start, len } => {
            let input = &rec.inputs[0];
            let cols = input.shape()[1];
            let rows = input.shape()[0];
            let mut ga = vec![0.0; input.numel()];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + len].copy_from_slice(&gout[r * len..(r + 1) * len]);
            }
            input.accumulate_grad(&ga);
        }
        Op::ConcatCols => {
            let rows = rec.output.shape()[0];
            let total = rec.output.shape()[1];
            let mut offset = 0;
            for part in &rec.inputs {
                let c = part.shape()[1];
                if part.requires_grad() {
                    let mut ga = vec![0.0; rows * c];
                    for r in 0..rows {
                        ga[r * c..(r + 1) * c].copy_from_slice(&gout[r * total + offset..r * total + offset + c]);
                    }
                    part.accumulate_grad(&ga);
                }
                offset += c;
            }
        }
        Op::AddRows => {
            let (a, row) = (&rec.inputs[0], &rec.inputs[1]);
            if a.requires_grad() {
                a.accumulate_grad(gout);
            }
            if row.requires_grad() {
                let cols = row.numel();
                let mut gr = vec![0.0; cols];
                for (i, g) in gout.iter().enumerate() {
                    gr[i % cols] += g;
                }
                row.accumulate_grad(&gr);
            }
        }
        Op::MulRows => {
            let (a, row) = (&rec.inputs[0], &rec.inputs[1]);
            let cols = row.numel();
            if a.requires_grad() {
                let rd = row.data();
                let ga: Vec<f64> = gout.iter().enumerate().map(|(i, g)| g * rd[i % cols]).collect();
                drop(rd);
                a.accumulate_grad(&ga);
            }
            if row.requires_grad() {
                let ad = a.data();
                let mut gr = vec![0.0; cols];
                for (i, g) in gout.iter().enumerate() {
                    gr[i % cols] += g * ad[i];
                }
                drop(ad);
                row.accumulate_grad(&gr);
            }
        }
        Op::LayerNorm => {
            // dx = inv_std * (dy - mean(dy) - y * mean(dy * y)) per row
            let y = rec.output.data();
            let cols = *rec.output.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for (row, (yrow, grow)) in y.chunks(cols).zip(gout.chunks(cols)).enumerate() {
                let inv_std = rec.saved[row];
                let mean_g: f64 = grow.iter().sum::<f64>() / cols as f64;
                let mean_gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                for j in 0..cols {
                    ga[row * cols + j] = inv_std * (grow[j] - mean_g - yrow[j] * mean_gy);
                }
            }
            drop(y);
            rec.inputs[0].accumulate_grad(&ga);
        }
    }
}
