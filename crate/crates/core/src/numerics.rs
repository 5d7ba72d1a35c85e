//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded onto a [`Tape`] in execution order; [`Tape::backward`]
//! replays them in exact reverse order and accumulates gradients into every
//! reachable tensor that requires them. Tensors are row-major `f64`, rank 1 or 2,
//! which covers every layer and loss in this crate.
//!
//! A tape is single-threaded; independent tapes may run concurrently.

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `[m x n] + [1 x n]`, the row broadcast used for biases.
    AddRow { x: usize, row: usize },
    /// `[m x n] + [m x 1]`, the column broadcast used for channel biases.
    AddCol { x: usize, col: usize },
    /// `[m x n] ⊙ [m x 1]`, per-row scaling (scalar fusion gates).
    MulCol { x: usize, col: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Log { x: usize },
    ClampMin { x: usize, lo: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    SoftmaxRows { x: usize },
    LayerNormRows { x: usize, gamma: Option<usize>, beta: Option<usize>, eps: f64 },
    ConcatCols { a: usize, b: usize },
    SliceCols { x: usize, from: usize, to: usize },
    SliceRow { x: usize, row: usize },
    StackRows { rows: Vec<usize> },
    SumAll { x: usize },
    MeanAll { x: usize },
    /// Column means: `[m x n] -> [1 x n]`.
    MeanRows { x: usize },
    /// Unfold `[c x t]` into convolution columns `[(c*k) x t']`.
    Im2Col { x: usize, kernel: usize, pad: usize, stride: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

/// Interpret a rank-1 or rank-2 shape as (rows, cols).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => unreachable!("tape tensors are rank 1 or 2"),
    }
}

/// Records primitive operations and their results in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded tensors.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    /// Accumulated gradient; `None` until a backward pass has reached the tensor.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn numel(&self, t: TensorId) -> usize {
        self.nodes[t.0].data.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, requires_grad, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, x: TensorId) -> bool {
        self.nodes[x.0].requires_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Dim(format!("tensor rank must be 1 or 2, got shape {}", fmt_shape(&shape))));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Dim(format!("tensor extents must be positive, got shape {}", fmt_shape(&shape))));
        }
        if data.len() != numel {
            return Err(Error::Dim(format!(
                "data length {} does not match shape {} (numel {})",
                data.len(),
                fmt_shape(&shape),
                numel
            )));
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<TensorId> {
        let numel = shape.iter().product();
        self.leaf(vec![0.0; numel], shape, false)
    }

    /// Copy of `x`'s current values as a fresh constant leaf. Gradient does not
    /// flow through a detached tensor.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Leaf, shape, data, false)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul inner dimensions do not match: {} x {}",
                fmt_shape(sa),
                fmt_shape(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose requires rank 2, got {}", fmt_shape(s))));
        }
        let (m, n) = (s[0], s[1]);
        let v = &self.nodes[x.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose { x: x.0 }, vec![n, m], out, rg))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Dim(format!("{name} shapes differ: {} vs {}", fmt_shape(sa), fmt_shape(sb))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, data, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, shape, data, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, shape, data, rg))
    }

    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        let (rm, rn) = rows_cols(&self.nodes[row.0].shape);
        if rm != 1 || rn != n {
            return Err(Error::Dim(format!(
                "add_row: {} + {} (expected row [1x{n}])",
                fmt_shape(&self.nodes[x.0].shape),
                fmt_shape(&self.nodes[row.0].shape)
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let rv = &self.nodes[row.0].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Op::AddRow { x: x.0, row: row.0 }, shape, data, rg))
    }

    pub fn add_col(&mut self, x: TensorId, col: TensorId) -> Result<TensorId> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        let (cm, cn) = rows_cols(&self.nodes[col.0].shape);
        if cn != 1 || cm != m {
            return Err(Error::Dim(format!(
                "add_col: {} + {} (expected column [{m}x1])",
                fmt_shape(&self.nodes[x.0].shape),
                fmt_shape(&self.nodes[col.0].shape)
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let cv = &self.nodes[col.0].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += cv[i];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(Op::AddCol { x: x.0, col: col.0 }, shape, data, rg))
    }

    pub fn mul_col(&mut self, x: TensorId, col: TensorId) -> Result<TensorId> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        let (cm, cn) = rows_cols(&self.nodes[col.0].shape);
        if cn != 1 || cm != m {
            return Err(Error::Dim(format!(
                "mul_col: {} ⊙ {} (expected column [{m}x1])",
                fmt_shape(&self.nodes[x.0].shape),
                fmt_shape(&self.nodes[col.0].shape)
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let cv = &self.nodes[col.0].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= cv[i];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(Op::MulCol { x: x.0, col: col.0 }, shape, data, rg))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Scale { x: x.0, c }, shape, data, rg)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::AddScalar { x: x.0 }, shape, data, rg)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Relu { x: x.0 }, shape, data, rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x: x.0 }, shape, data, rg)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Tanh { x: x.0 }, shape, data, rg)
    }

    /// Natural log. Non-positive entries are a domain error; callers that may
    /// feed zeros must clamp first (see `clamp_min`).
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some((i, v)) = self.nodes[x.0].data.iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::Domain(format!(
                "log of non-positive input: element {i} = {v} in tensor {}",
                fmt_shape(&self.nodes[x.0].shape)
            )));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Op::Log { x: x.0 }, shape, data, rg))
    }

    pub fn clamp_min(&mut self, x: TensorId, lo: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(lo)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::ClampMin { x: x.0, lo }, shape, data, rg)
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Clamp { x: x.0, lo, hi }, shape, data, rg)
    }

    // ── row-structured ops ──────────────────────────────────────────────

    /// Softmax over each row, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        let v = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::SoftmaxRows { x: x.0 }, shape, data, rg)
    }

    /// Layer normalization over each row, with optional affine parameters
    /// (`gamma`, `beta` are `[1 x n]`).
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: Option<TensorId>,
        beta: Option<TensorId>,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                let (pm, pn) = rows_cols(&self.nodes[p.0].shape);
                if pm != 1 || pn != n {
                    return Err(Error::Dim(format!(
                        "layer_norm {name} must be [1x{n}], got {}",
                        fmt_shape(&self.nodes[p.0].shape)
                    )));
                }
            }
        }
        let v = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std;
            }
        }
        if let Some(g) = gamma {
            let gv = &self.nodes[g.0].data;
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] *= gv[j];
                }
            }
        }
        if let Some(b) = beta {
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += bv[j];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || gamma.map_or(false, |g| self.rg(g)) || beta.map_or(false, |b| self.rg(b));
        Ok(self.push(
            Op::LayerNormRows { x: x.0, gamma: gamma.map(|g| g.0), beta: beta.map(|b| b.0), eps },
            shape,
            data,
            rg,
        ))
    }

    /// Concatenate along the last dimension: `[m x p] ++ [m x q] -> [m x (p+q)]`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, na) = rows_cols(&self.nodes[a.0].shape);
        let (mb, nb) = rows_cols(&self.nodes[b.0].shape);
        if ma != mb {
            return Err(Error::Dim(format!(
                "concat_cols row counts differ: {} vs {}",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(&self.nodes[b.0].shape)
            )));
        }
        let n = na + nb;
        let mut data = vec![0.0; ma * n];
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..ma {
            data[i * n..i * n + na].copy_from_slice(&av[i * na..(i + 1) * na]);
            data[i * n + na..(i + 1) * n].copy_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        // Preserve rank-1 inputs as rank-1 output.
        let shape = if self.nodes[a.0].shape.len() == 1 && self.nodes[b.0].shape.len() == 1 {
            vec![n]
        } else {
            vec![ma, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols { a: a.0, b: b.0 }, shape, data, rg))
    }

    pub fn slice_cols(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        if from >= to || to > n {
            return Err(Error::Dim(format!(
                "slice_cols [{from}, {to}) out of range for {}",
                fmt_shape(&self.nodes[x.0].shape)
            )));
        }
        let w = to - from;
        let v = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&v[i * n + from..i * n + to]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x: x.0, from, to }, vec![m, w], data, rg))
    }

    pub fn slice_row(&mut self, x: TensorId, row: usize) -> Result<TensorId> {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        if row >= m {
            return Err(Error::Dim(format!(
                "slice_row {row} out of range for {}",
                fmt_shape(&self.nodes[x.0].shape)
            )));
        }
        let data = self.nodes[x.0].data[row * n..(row + 1) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRow { x: x.0, row }, vec![1, n], data, rg))
    }

    /// Stack `k` row vectors `[1 x n]` into `[k x n]`.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows needs at least one row".into()));
        }
        let (_, n) = rows_cols(&self.nodes[rows[0].0].shape);
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for r in rows {
            let (rm, rn) = rows_cols(&self.nodes[r.0].shape);
            if rm != 1 || rn != n {
                return Err(Error::Dim(format!(
                    "stack_rows expects [1x{n}] rows, got {}",
                    fmt_shape(&self.nodes[r.0].shape)
                )));
            }
            data.extend_from_slice(&self.nodes[r.0].data);
            rg |= self.rg(*r);
        }
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        Ok(self.push(Op::StackRows { rows: ids }, vec![rows.len(), n], data, rg))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll { x: x.0 }, vec![1], vec![s], rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(Op::MeanAll { x: x.0 }, vec![1], vec![s / n], rg)
    }

    /// Mean over rows (column means): `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let (m, n) = rows_cols(&self.nodes[x.0].shape);
        let v = &self.nodes[x.0].data;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += v[i * n + j];
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let rg = self.rg(x);
        self.push(Op::MeanRows { x: x.0 }, vec![1, n], data, rg)
    }

    // ── convolution support ─────────────────────────────────────────────

    /// Unfold `[c x t]` into `[(c*kernel) x t']` columns for 1-D convolution,
    /// with zero padding; `t' = (t + 2*pad - kernel)/stride + 1`.
    pub fn im2col(&mut self, x: TensorId, kernel: usize, pad: usize, stride: usize) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::Dim(format!("im2col requires rank 2 [channels x time], got {}", fmt_shape(s))));
        }
        let (c, t) = (s[0], s[1]);
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if t + 2 * pad < kernel {
            return Err(Error::Dim(format!(
                "conv input too short: t={t} with pad={pad} cannot fit kernel={kernel}"
            )));
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let v = &self.nodes[x.0].data;
        let mut data = vec![0.0; c * kernel * t_out];
        for ch in 0..c {
            for k in 0..kernel {
                let r = ch * kernel + k;
                for to in 0..t_out {
                    let ti = to * stride + k;
                    if ti >= pad && ti - pad < t {
                        data[r * t_out + to] = v[ch * t + (ti - pad)];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Im2Col { x: x.0, kernel, pad, stride }, vec![c * kernel, t_out], data, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients are accumulated (`+=`) into
    /// every reachable tensor with `requires_grad`; calling twice without
    /// clearing doubles them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(&self.nodes[loss.0].shape)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing reachable requires grad
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            let acc = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Adds this node's contribution to each differentiable input's adjoint.
        macro_rules! buf {
            ($idx:expr) => {{
                let len = self.nodes[$idx].data.len();
                adj[$idx].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let needs = |idx: usize| self.nodes[idx].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(&self.nodes[*a].shape);
                let n = rows_cols(&self.nodes[*b].shape).1;
                if needs(*a) {
                    let bv = &self.nodes[*b].data;
                    let da = buf!(*a);
                    for ii in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[ii * n + j] * bv[p * n + j];
                            }
                            da[ii * k + p] += s;
                        }
                    }
                }
                if needs(*b) {
                    let av = &self.nodes[*a].data;
                    let db = buf!(*b);
                    for ii in 0..m {
                        for p in 0..k {
                            let aip = av[ii * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[ii * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if needs(*x) {
                    let (m, n) = rows_cols(&self.nodes[*x].shape);
                    let dx = buf!(*x);
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[j * m + ii];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    let da = buf!(*a);
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*b) {
                    let db = buf!(*b);
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    let da = buf!(*a);
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*b) {
                    let db = buf!(*b);
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bv = &self.nodes[*b].data;
                    let da = buf!(*a);
                    for ((d, gi), bvi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bvi;
                    }
                }
                if needs(*b) {
                    let av = &self.nodes[*a].data;
                    let db = buf!(*b);
                    for ((d, gi), avi) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * avi;
                    }
                }
            }
            Op::AddRow { x, row } => {
                let (m, n) = rows_cols(&self.nodes[*x].shape);
                if needs(*x) {
                    let dx = buf!(*x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*row) {
                    let dr = buf!(*row);
                    for ii in 0..m {
                        for j in 0..n {
                            dr[j] += g[ii * n + j];
                        }
                    }
                }
            }
            Op::AddCol { x, col } => {
                let (m, n) = rows_cols(&self.nodes[*x].shape);
                if needs(*x) {
                    let dx = buf!(*x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*col) {
                    let dc = buf!(*col);
                    for ii in 0..m {
                        for j in 0..n {
                            dc[ii] += g[ii * n + j];
                        }
                    }
                }
            }
            Op::MulCol { x, col } => {
                let (m, n) = rows_cols(&self.nodes[*x].shape);
                if needs(*x) {
                    let cv = &self.nodes[*col].data;
                    let dx = buf!(*x);
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[ii * n + j] * cv[ii];
                        }
                    }
                }
                if needs(*col) {
                    let xv = &self.nodes[*x].data;
                    let dc = buf!(*col);
                    for ii in 0..m {
                        for j in 0..n {
                            dc[ii] += g[ii * n + j] * xv[ii * n + j];
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs(*x) {
                    let dx = buf!(*x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::AddScalar { x } => {
                if needs(*x) {
                    let dx = buf!(*x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let xv = &self.nodes[*x].data;
                    let dx = buf!(*x);
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let sv = &self.nodes[i].data;
                    let dx = buf!(*x);
                    for ((d, gi), si) in dx.iter_mut().zip(g).zip(sv) {
                        *d += gi * si * (1.0 - si);
                    }
                }
            }
            Op::Tanh { x } => {
                if needs(*x) {
                    let tv = &self.nodes[i].data;
                    let dx = buf!(*x);
                    for ((d, gi), ti) in dx.iter_mut().zip(g).zip(tv) {
                        *d += gi * (1.0 - ti * ti);
                    }
                }
            }
            Op::Log { x } => {
                if needs(*x) {
                    let xv = &self.nodes[*x].data;
                    let dx = buf!(*x);
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi / xi;
                    }
                }
            }
            Op::ClampMin { x, lo } => {
                if needs(*x) {
                    let xv = &self.nodes[*x].data;
                    let dx = buf!(*x);
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi >= *lo {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if needs(*x) {
                    let xv = &self.nodes[*x].data;
                    let dx = buf!(*x);
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi >= *lo && *xi <= *hi {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if needs(*x) {
                    let (m, n) = rows_cols(&self.nodes[i].shape);
                    let sv = &self.nodes[i].data;
                    let dx = buf!(*x);
                    for ii in 0..m {
                        let srow = &sv[ii * n..(ii + 1) * n];
                        let grow = &g[ii * n..(ii + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(s, gi)| s * gi).sum();
                        for j in 0..n {
                            dx[ii * n + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (m, n) = rows_cols(&self.nodes[*x].shape);
                let xv = &self.nodes[*x].data;
                let nf = n as f64;
                for ii in 0..m {
                    let row = &xv[ii * n..(ii + 1) * n];
                    let grow = &g[ii * n..(ii + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    if let Some(gm) = gamma {
                        if needs(*gm) {
                            let dg = buf!(*gm);
                            for j in 0..n {
                                dg[j] += grow[j] * xhat[j];
                            }
                        }
                    }
                    if let Some(bt) = beta {
                        if needs(*bt) {
                            let db = buf!(*bt);
                            for j in 0..n {
                                db[j] += grow[j];
                            }
                        }
                    }
                    if needs(*x) {
                        let gv = gamma.map(|gm| &self.nodes[gm].data);
                        let dxhat: Vec<f64> = (0..n)
                            .map(|j| grow[j] * gv.map_or(1.0, |gv| gv[j]))
                            .collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let dx = buf!(*x);
                        for j in 0..n {
                            dx[ii * n + j] +=
                                inv_std / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, na) = rows_cols(&self.nodes[*a].shape);
                let nb = rows_cols(&self.nodes[*b].shape).1;
                let n = na + nb;
                if needs(*a) {
                    let da = buf!(*a);
                    for ii in 0..m {
                        for j in 0..na {
                            da[ii * na + j] += g[ii * n + j];
                        }
                    }
                }
                if needs(*b) {
                    let db = buf!(*b);
                    for ii in 0..m {
                        for j in 0..nb {
                            db[ii * nb + j] += g[ii * n + na + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, from, to } => {
                if needs(*x) {
                    let (m, n) = rows_cols(&self.nodes[*x].shape);
                    let w = to - from;
                    let dx = buf!(*x);
                    for ii in 0..m {
                        for j in 0..w {
                            dx[ii * n + from + j] += g[ii * w + j];
                        }
                    }
                }
            }
            Op::SliceRow { x, row } => {
                if needs(*x) {
                    let n = rows_cols(&self.nodes[*x].shape).1;
                    let dx = buf!(*x);
                    for j in 0..n {
                        dx[row * n + j] += g[j];
                    }
                }
            }
            Op::StackRows { rows } => {
                let n = rows_cols(&self.nodes[i].shape).1;
                for (r, id) in rows.iter().enumerate() {
                    if needs(*id) {
                        let dr = buf!(*id);
                        for j in 0..n {
                            dr[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if needs(*x) {
                    let dx = buf!(*x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if needs(*x) {
                    let len = self.nodes[*x].data.len() as f64;
                    let dx = buf!(*x);
                    for d in dx.iter_mut() {
                        *d += g[0] / len;
                    }
                }
            }
            Op::MeanRows { x } => {
                if needs(*x) {
                    let (m, n) = rows_cols(&self.nodes[*x].shape);
                    let dx = buf!(*x);
                    for ii in 0..m {
                        for j in 0..n {
                            dx[ii * n + j] += g[j] / m as f64;
                        }
                    }
                }
            }
            Op::Im2Col { x, kernel, pad, stride } => {
                if needs(*x) {
                    let (c, t) = rows_cols(&self.nodes[*x].shape);
                    let t_out = rows_cols(&self.nodes[i].shape).1;
                    let dx = buf!(*x);
                    for ch in 0..c {
                        for k in 0..*kernel {
                            let r = ch * kernel + k;
                            for to in 0..t_out {
                                let ti = to * stride + k;
                                if ti >= *pad && ti - pad < t {
                                    dx[ch * t + (ti - pad)] += g[r * t_out + to];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
