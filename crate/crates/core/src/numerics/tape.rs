use std::collections::HashMap;

use super::tensor::{log_softmax_slice, sigmoid, softmax_slice, Scalar, Tensor};
use crate::error::{Result, SsnError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range of a packed sequence matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    /// Consecutive segments for the given lengths, starting at row 0.
    pub fn packed(lens: &[usize]) -> Vec<Segment> {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }

    fn end(self) -> usize {
        self.start + self.len
    }
}

/// Recorded operation. Saved activations live next to the op that needs them.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Param(usize),
    /// Value computed outside the tape; has no adjoint.
    Opaque(&'static str, Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    OneMinus(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    MeanRows(Var),
    SumCols(Var),
    MeanAll(Var),
    Diag(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<Segment>),
    Interleave {
        a: Var,
        a_segs: Vec<Segment>,
        b: Var,
        b_segs: Vec<Segment>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Opaque(name, _) => name,
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::OneMinus(_) => "one_minus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Log(..) => "log",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SumCols(_) => "sum_cols",
            Op::MeanAll(_) => "mean_all",
            Op::Diag(_) => "diag",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::SegmentMean(..) => "segment_mean",
            Op::Interleave { .. } => "interleave",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Linear record of a forward pass. Nodes are appended in evaluation order,
/// so reverse index order is a valid reverse topological order.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(msg: String) -> SsnError {
    SsnError::Dimension(msg)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a trainable tensor. Registering the same id twice returns the
    /// original handle, so each parameter owns exactly one gradient slot.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn opaque(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var]) -> Var {
        self.push(value, Op::Opaque(name, inputs.to_vec()))
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape2(a) != self.shape2(b) {
            return Err(dim_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape2(a),
                self.shape2(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?.as_matrix();
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?.as_matrix();
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?.as_matrix();
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + row` with the `1 x d` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(x, row, |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(x, row, |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    fn broadcast_row(&self, x: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (n, d) = self.shape2(x);
        let r = self.value(row);
        if r.len() != d {
            return Err(dim_err(format!("row broadcast of {} over width {d}", r.len())));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(xv.row(i).iter().zip(r.data()).map(|(&a, &b)| f(a, b)));
        }
        Tensor::matrix(n, d, out)
    }

    /// `x * col` with the `n x 1` column broadcast across each row of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, d) = self.shape2(x);
        let c = self.value(col);
        if c.len() != n {
            return Err(dim_err(format!("column broadcast of {} over {n} rows", c.len())));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let g = c.data()[i];
            out.extend(xv.row(i).iter().map(|&a| a * g));
        }
        let out = Tensor::matrix(n, d, out)?;
        Ok(self.push(out, Op::MulCol(x, col)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c).as_matrix();
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c).as_matrix();
        self.push(out, Op::AddScalar(x))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() - v).as_matrix();
        self.push(out, Op::OneMinus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid).as_matrix();
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero())).as_matrix();
        self.push(out, Op::Relu(x))
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: T) -> Var {
        let out = self.value(x).map(|v| (v + eps).ln()).as_matrix();
        self.push(out, Op::Log(x, eps))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.row_wise(x, softmax_slice);
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = self.row_wise(x, log_softmax_slice);
        self.push(out, Op::LogSoftmaxRows(x))
    }

    fn row_wise(&self, x: Var, f: impl Fn(&[T], &mut [T])) -> Tensor<T> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            f(xv.row(i), out.row_mut(i));
        }
        out
    }

    /// Zero-mean unit-variance rows (layer norm without the affine part).
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let dn = T::from_usize(d).unwrap();
        let mut out = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::NormalizeRows { x, inv_std })
    }

    /// Layer norm with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.normalize_rows(x, eps);
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, d]);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if !(norm > T::zero()) {
                return Err(SsnError::Numeric(format!(
                    "cannot L2-normalize row {i} with norm {norm:?}"
                )));
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o = *o + v;
            }
        }
        let nn = T::from_usize(n).unwrap();
        let out = Tensor::matrix(1, d, out.into_iter().map(|v| v / nn).collect()).unwrap();
        self.push(out, Op::MeanRows(x))
    }

    /// Per-row sums, `n x d -> n x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let data = (0..n)
            .map(|i| xv.row(i).iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let out = Tensor::matrix(n, 1, data).unwrap();
        self.push(out, Op::SumCols(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / T::from_usize(xv.len()).unwrap();
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.shape2(x);
        if n != m {
            return Err(dim_err(format!("diag of {n}x{m}")));
        }
        let xv = self.value(x);
        let out = Tensor::matrix(n, 1, (0..n).map(|i| xv.get(i, i)).collect())?;
        Ok(self.push(out, Op::Diag(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape2(parts[0]).0;
        if parts.iter().any(|&p| self.shape2(p).0 != n) {
            return Err(dim_err("concat_cols with differing row counts".into()));
        }
        let width: usize = parts.iter().map(|&p| self.shape2(p).1).sum();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(n, width, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.shape2(x);
        if start + len > n {
            return Err(dim_err(format!("rows {start}..{} of {n}", start + len)));
        }
        let xv = self.value(x);
        let out = Tensor::matrix(len, d, xv.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    /// Embedding-style lookup of rows by index.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.shape2(x).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(dim_err(format!("gather index {bad} out of {n} rows")));
        }
        let out = self.value(x).select_rows(indices);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec())))
    }

    /// Repeats row `i` of `x` `counts[i]` times, in order.
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let n = self.shape2(x).0;
        if counts.len() != n {
            return Err(dim_err(format!("{} repeat counts for {n} rows", counts.len())));
        }
        let idx: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat(i).take(c))
            .collect();
        let out = self.value(x).select_rows(&idx);
        Ok(self.push(out, Op::RepeatRows(x, counts.to_vec())))
    }

    /// Mean of each row segment, one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let (n, d) = self.shape2(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(segs.len() * d);
        for s in segs {
            if s.len == 0 || s.end() > n {
                return Err(dim_err(format!("segment {s:?} in {n} rows")));
            }
            let mut acc = vec![T::zero(); d];
            for r in s.start..s.end() {
                for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                    *a = *a + v;
                }
            }
            let len = T::from_usize(s.len).unwrap();
            out.extend(acc.into_iter().map(|v| v / len));
        }
        let out = Tensor::matrix(segs.len(), d, out)?;
        Ok(self.push(out, Op::SegmentMean(x, segs.to_vec())))
    }

    /// Per-item concatenation of two packed sequences: the output holds item
    /// 0's `a` rows, then item 0's `b` rows, then item 1's `a` rows, and so on.
    pub fn interleave(
        &mut self,
        a: Var,
        a_segs: &[Segment],
        b: Var,
        b_segs: &[Segment],
    ) -> Result<Var> {
        if a_segs.len() != b_segs.len() {
            return Err(dim_err("interleave with differing item counts".into()));
        }
        let (na, d) = self.shape2(a);
        let (nb, db) = self.shape2(b);
        if d != db {
            return Err(dim_err(format!("interleave widths {d} and {db}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity((na + nb) * d);
        for (sa, sb) in a_segs.iter().zip(b_segs) {
            if sa.end() > na || sb.end() > nb {
                return Err(dim_err("interleave segment out of range".into()));
            }
            out.extend_from_slice(&av.data()[sa.start * d..sa.end() * d]);
            out.extend_from_slice(&bv.data()[sb.start * d..sb.end() * d]);
        }
        let rows = out.len() / d.max(1);
        let out = Tensor::matrix(rows, d, out)?;
        Ok(self.push(
            out,
            Op::Interleave {
                a,
                a_segs: a_segs.to_vec(),
                b,
                b_segs: b_segs.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention, restricted to within each
    /// segment. `q`, `k`, `v` are packed `n x d` matrices; head `h` uses
    /// columns `h*d/heads .. (h+1)*d/heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let (n, d) = self.shape2(q);
        if self.shape2(k) != (n, d) || self.shape2(v) != (n, d) {
            return Err(dim_err("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(SsnError::Config(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in segments {
            if s.end() > n || s.len == 0 {
                return Err(dim_err(format!("attention segment {s:?} in {n} rows")));
            }
            for h in 0..heads {
                let c0 = h * dh;
                for i in s.start..s.end() {
                    scores.clear();
                    let qi = &qv.row(i)[c0..c0 + dh];
                    for j in s.start..s.end() {
                        let kj = &kv.row(j)[c0..c0 + dh];
                        let dot = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        scores.push(dot * scale);
                    }
                    let base = probs.len();
                    probs.resize(base + s.len, T::zero());
                    softmax_slice(&scores, &mut probs[base..]);
                    let o = &mut out[i * d + c0..i * d + c0 + dh];
                    for (jj, j) in (s.start..s.end()).enumerate() {
                        let p = probs[base + jj];
                        for (oc, &vc) in o.iter_mut().zip(&vv.row(j)[c0..c0 + dh]) {
                            *oc = *oc + p * vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// `x W + b` for a `1 x out` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse-mode sweep from `output`, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if seed.len() != out_val.len() {
            return Err(dim_err(format!(
                "seed has {} elements, output has {}",
                seed.len(),
                out_val.len()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(
            seed.clone()
                .reshape(&[out_val.rows(), out_val.cols()])?,
        );
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>| {
            let shaped = {
                let t = &self.nodes[v.0].value;
                Tensor::matrix(t.rows(), t.cols(), d.into_data()).expect("gradient shape")
            };
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&shaped),
                slot @ None => *slot = Some(shaped),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Opaque(name, _) => return Err(SsnError::UnsupportedOp((*name).to_string())),
            Op::MatMul(a, b) => {
                let av = self.value(*a).as_matrix();
                let bv = self.value(*b).as_matrix();
                acc(grads, *a, g.matmul(&bv.transpose())?);
                acc(grads, *b, av.transpose().matmul(g)?);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(&bv.as_matrix(), |x, y| x * y)?);
                acc(grads, *b, g.zip_map(&av.as_matrix(), |x, y| x * y)?);
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, g.clone());
                acc(grads, *row, column_sums(g));
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let (n, d) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dr = vec![T::zero(); d];
                for i in 0..n {
                    let (gi, xi) = (g.row(i), xv.row(i));
                    for c in 0..d {
                        dx.row_mut(i)[c] = gi[c] * rv.data()[c];
                        dr[c] = dr[c] + gi[c] * xi[c];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *row, Tensor::vector(dr));
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let (n, d) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dc = vec![T::zero(); n];
                for i in 0..n {
                    let c = cv.data()[i];
                    let (gi, xi) = (g.row(i), xv.row(i));
                    let mut s = T::zero();
                    for j in 0..d {
                        dx.row_mut(i)[j] = gi[j] * c;
                        s = s + gi[j] * xi[j];
                    }
                    dc[i] = s;
                }
                acc(grads, *x, dx);
                acc(grads, *col, Tensor::vector(dc));
            }
            Op::Scale(x, c) => acc(grads, *x, g.scale(*c)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::OneMinus(x) => acc(grads, *x, g.scale(-T::one())),
            Op::Sigmoid(x) => acc(grads, *x, g.zip_map(y, |gv, s| gv * s * (T::one() - s))?),
            Op::Relu(x) => {
                let xv = self.value(*x).as_matrix();
                acc(
                    grads,
                    *x,
                    g.zip_map(&xv, |gv, v| if v > T::zero() { gv } else { T::zero() })?,
                );
            }
            Op::Log(x, eps) => {
                let xv = self.value(*x).as_matrix();
                let e = *eps;
                acc(grads, *x, g.zip_map(&xv, |gv, v| gv / (v + e))?);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Tensor::zeros(&[g.rows(), g.cols()]);
                for i in 0..g.rows() {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let dot = gi.iter().zip(yi).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for (o, (&gv, &yv)) in dx.row_mut(i).iter_mut().zip(gi.iter().zip(yi)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = Tensor::zeros(&[g.rows(), g.cols()]);
                for i in 0..g.rows() {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let total = gi.iter().fold(T::zero(), |a, &v| a + v);
                    for (o, (&gv, &lv)) in dx.row_mut(i).iter_mut().zip(gi.iter().zip(yi)) {
                        *o = gv - lv.exp() * total;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::NormalizeRows { x, inv_std } => {
                let (n, d) = (g.rows(), g.cols());
                let dn = T::from_usize(d).unwrap();
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let mean_g = gi.iter().fold(T::zero(), |a, &v| a + v) / dn;
                    let mean_gy = gi.iter().zip(yi).fold(T::zero(), |a, (&p, &q)| a + p * q) / dn;
                    for (o, (&gv, &yv)) in dx.row_mut(i).iter_mut().zip(gi.iter().zip(yi)) {
                        *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, d) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let dot = gi.iter().zip(yi).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for (o, (&gv, &yv)) in dx.row_mut(i).iter_mut().zip(gi.iter().zip(yi)) {
                        *o = (gv - yv * dot) / norms[i];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let inv = T::one() / T::from_usize(n).unwrap();
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let mut dx = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    dx.extend_from_slice(&row);
                }
                acc(grads, *x, Tensor::vector(dx));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = Vec::with_capacity(n * d);
                for i in 0..n {
                    dx.extend(std::iter::repeat(g.data()[i]).take(d));
                }
                acc(grads, *x, Tensor::vector(dx));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let v = g.item() / T::from_usize(n).unwrap();
                acc(grads, *x, Tensor::vector(vec![v; n]));
            }
            Op::Diag(x) => {
                let n = g.rows();
                let mut dx = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    dx.row_mut(i)[i] = g.data()[i];
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    acc(grads, p, Tensor::vector(dp));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    acc(grads, p, Tensor::vector(g.data()[row * d..(row + r) * d].to_vec()));
                    row += r;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * d..start * d + g.len()].copy_from_slice(g.data());
                acc(grads, *x, Tensor::vector(dx));
            }
            Op::GatherRows(x, indices) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(&[xv.rows(), xv.cols()]);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::RepeatRows(x, counts) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(&[xv.rows(), xv.cols()]);
                let mut r = 0;
                for (i, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                        r += 1;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SegmentMean(x, segs) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(&[xv.rows(), xv.cols()]);
                for (si, s) in segs.iter().enumerate() {
                    let inv = T::one() / T::from_usize(s.len).unwrap();
                    for r in s.start..s.end() {
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(si)) {
                            *o = *o + v * inv;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Interleave {
                a,
                a_segs,
                b,
                b_segs,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = g.cols();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                let mut row = 0;
                for (sa, sb) in a_segs.iter().zip(b_segs) {
                    for r in sa.start..sa.end() {
                        for c in 0..d {
                            da[r * d + c] = da[r * d + c] + g.row(row)[c];
                        }
                        row += 1;
                    }
                    for r in sb.start..sb.end() {
                        for c in 0..d {
                            db[r * d + c] = db[r * d + c] + g.row(row)[c];
                        }
                        row += 1;
                    }
                }
                acc(grads, *a, Tensor::vector(da));
                acc(grads, *b, Tensor::vector(db));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    g,
                    *heads,
                    segments,
                    probs,
                );
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::vector(out)
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: &Tensor<T>,
    heads: usize,
    segments: &[Segment],
    probs: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let mut offset = 0;
    let mut dp = Vec::new();
    for s in segments {
        for h in 0..heads {
            let c0 = h * dh;
            for i in s.start..s.start + s.len {
                let p = &probs[offset..offset + s.len];
                offset += s.len;
                let gi = &g.row(i)[c0..c0 + dh];
                // dV_j += p_ij g_i ; dP_ij = g_i . v_j
                dp.clear();
                for (jj, j) in (s.start..s.start + s.len).enumerate() {
                    let vj = &v.row(j)[c0..c0 + dh];
                    dp.push(gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y));
                    for (o, &gv) in dv.row_mut(j)[c0..c0 + dh].iter_mut().zip(gi) {
                        *o = *o + p[jj] * gv;
                    }
                }
                let dot = dp.iter().zip(p).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (jj, j) in (s.start..s.start + s.len).enumerate() {
                    let ds = p[jj] * (dp[jj] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &k.row(j)[c0..c0 + dh];
                    let qi = &q.row(i)[c0..c0 + dh];
                    for (o, &kv) in dq.row_mut(i)[c0..c0 + dh].iter_mut().zip(kj) {
                        *o = *o + ds * kv;
                    }
                    for (o, &qv) in dk.row_mut(j)[c0..c0 + dh].iter_mut().zip(qi) {
                        *o = *o + ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<usize, Tensor<T>> {
        &self.params
    }
}
