//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on the tape is an `Array2<f64>`; vectors are `1×n`
//! matrices and scalars are `1×1`. Sequences are laid out with time on
//! rows and features on columns, so most ops work row-wise.
//!
//! A [`Graph`] is built fresh for each forward pass. Parameters are bound
//! by name from a [`ParamStore`]; after [`Graph::backward`] the gradient of
//! every trainable parameter can be read back by name.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Mat),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Exp(Var),
    Gelu(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Im2Col {
        input: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    SumCols(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

/// Output length of a strided 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = len + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a named parameter. Repeated calls return the same node.
    /// Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, store.is_trainable(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k1) = self.shape(a);
        let (k2, _) = self.shape(b);
        if k1 != k2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(Error::Shape(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Broadcast-add a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// Broadcast-multiply every row of `a` by a `1×d` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(Error::Shape(format!(
                "mul_row: {:?} * {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant matrix (e.g. an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Result<Var> {
        if self.value(a).dim() != c.dim() {
            return Err(Error::Shape("add_const".into()));
        }
        let value = self.value(a) + c;
        let ng = self.ng(a);
        Ok(self.push(value, Op::AddConst(a), ng))
    }

    /// `a ⊙ c` for a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        if self.value(a).dim() != c.dim() {
            return Err(Error::Shape("mul_const".into()));
        }
        let value = self.value(a) * &c;
        let ng = self.ng(a);
        Ok(self.push(value, Op::MulConst(a, c), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Zero-mean, unit-variance per row (layer norm without affine).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let d = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != d) {
            return Err(Error::Shape("concat_rows: column mismatch".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let n = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::Shape("concat_cols: row mismatch".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > self.shape(a).0 {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} of {:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > self.shape(a).1 {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} of {:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    /// Row lookup: output row `i` is `a[indices[i]]`. Used for embeddings.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(a);
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather of no rows".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row index {bad} out of {n}")));
        }
        let src = self.value(a);
        let mut value = Mat::zeros((indices.len(), d));
        for (i, &r) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), ng))
    }

    /// Unfold a `L×C` sequence into `L'×(kernel·C)` patches, kernel-major,
    /// with zero padding on both ends.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (len, ch) = self.shape(a);
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "kernel and stride must be ≥ 1".into(),
            ));
        }
        let out_len = conv_out_len(len, kernel, stride, pad);
        if out_len == 0 {
            return Err(Error::SequenceTooShort);
        }
        let x = self.value(a);
        let mut value = Mat::zeros((out_len, kernel * ch));
        for i in 0..out_len {
            for j in 0..kernel {
                let src = (i * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    value
                        .slice_mut(s![i, j * ch..(j + 1) * ch])
                        .assign(&x.row(src as usize));
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            value,
            Op::Im2Col {
                input: a,
                kernel,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Pick single entries into a `1×n` row.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.shape(a);
        if at.is_empty() {
            return Err(Error::InvalidArgument("pick of nothing".into()));
        }
        if at.iter().any(|&(r, c)| r >= n || c >= d) {
            return Err(Error::Shape("pick index out of range".into()));
        }
        let x = self.value(a);
        let value = Mat::from_shape_fn((1, at.len()), |(_, k)| x[at[k]]);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Pick(a, at.to_vec()), ng))
    }

    /// Sum of all entries as a `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Per-row sums as an `n×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Reverse pass from a scalar (`1×1`) output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.shape(out) != (1, 1) {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.dot(val(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, dy.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, -dy);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy * val(*b));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, dy * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy * val(*row));
                }
                if self.ng(*row) {
                    let g = (dy * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, g);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, dy * *c),
            Op::AddConst(a) => self.accumulate(grads, *a, dy.clone()),
            Op::MulConst(a, c) => self.accumulate(grads, *a, dy * c),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = dy * y;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.sum();
                    grow.zip_mut_with(&yrow, |gi, &yi| *gi -= yi * dot);
                }
                self.accumulate(grads, *a, g);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut g = dy.clone();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let total = grow.sum();
                    grow.zip_mut_with(&yrow, |gi, &yi| *gi -= yi.exp() * total);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => self.accumulate(grads, *a, dy * &node.value),
            Op::Gelu(a) => {
                let x = val(*a);
                let mut g = dy.clone();
                g.zip_mut_with(x, |gi, &xi| {
                    let inner = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let t = inner.tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    *gi *= d;
                });
                self.accumulate(grads, *a, g);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut g = Mat::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let dyr = dy.row(r);
                    let yr = y.row(r);
                    let mean_dy = dyr.sum() / n;
                    let mean_dyy = dyr.dot(&yr) / n;
                    for c in 0..xr.len() {
                        g[[r, c]] = inv * (dyr[c] - mean_dy - yr[c] * mean_dyy);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.ng(p) {
                        self.accumulate(grads, p, dy.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).1;
                    if self.ng(p) {
                        self.accumulate(grads, p, dy.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Mat::zeros(self.shape(*a));
                g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Mat::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                self.accumulate(grads, *a, g);
            }
            Op::GatherRows(a, indices) => {
                let mut g = Mat::zeros(self.shape(*a));
                for (i, &r) in indices.iter().enumerate() {
                    let mut row = g.row_mut(r);
                    row += &dy.row(i);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Im2Col {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (len, ch) = self.shape(*input);
                let mut g = Mat::zeros((len, ch));
                for i in 0..dy.nrows() {
                    for j in 0..*kernel {
                        let src = (i * stride + j) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < len {
                            let mut row = g.row_mut(src as usize);
                            row += &dy.slice(s![i, j * ch..(j + 1) * ch]);
                        }
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::Pick(a, at) => {
                let mut g = Mat::zeros(self.shape(*a));
                for (k, &idx) in at.iter().enumerate() {
                    g[idx] += dy[[0, k]];
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let g = Mat::from_elem(self.shape(*a), dy[[0, 0]]);
                self.accumulate(grads, *a, g);
            }
            Op::SumCols(a) => {
                let (n, d) = self.shape(*a);
                let g = Mat::from_shape_fn((n, d), |(r, _)| dy[[r, 0]]);
                self.accumulate(grads, *a, g);
            }
        }
    }

    /// Gradients of every trainable bound parameter, by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter(|(_, &v)| self.ng(v))
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Numerically stable row softmax. Rows may contain `-inf` entries but
/// must have at least one finite entry.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for idx in ndarray::indices(x0.dim()) {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[idx] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "at {idx:?}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn weights(n: usize, d: usize, seed: f64) -> Mat {
        Mat::from_shape_fn((n, d), |(i, j)| ((i * d + j) as f64 * 0.37 + seed).sin())
    }

    fn weighted_sum(g: &mut Graph, v: Var, seed: f64) -> Var {
        let (n, d) = g.shape(v);
        let w = g.constant(weights(n, d, seed));
        let m = g.mul(v, w).unwrap();
        g.sum(m)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1.0, 2.0, 3.0], [f64::NEG_INFINITY, 0.0, 0.0]];
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(y[[1, 0]], 0.0);
    }

    #[test]
    fn grad_matmul_and_transpose() {
        let b0 = weights(3, 2, 0.5);
        fd_check(
            move |g, x| {
                let b = g.constant(b0.clone());
                let y = g.matmul(x, b).unwrap();
                let z = g.matmul_t(y, y).unwrap();
                weighted_sum(g, z, 0.1)
            },
            weights(4, 3, 1.0),
        );
    }

    #[test]
    fn grad_softmax_logsoftmax_exp() {
        fd_check(
            |g, x| {
                let p = g.softmax_rows(x);
                let l = g.log_softmax_rows(x);
                let e = g.exp(l);
                let s = g.add(p, e).unwrap();
                let m = g.mul(s, l).unwrap();
                weighted_sum(g, m, 0.3)
            },
            weights(3, 4, 2.0),
        );
    }

    #[test]
    fn grad_normalize_gelu_rows() {
        let r0 = weights(1, 5, 0.7);
        fd_check(
            move |g, x| {
                let n = g.normalize_rows(x);
                let r = g.constant(r0.clone());
                let m = g.mul_row(n, r).unwrap();
                let a = g.add_row(m, r).unwrap();
                let ge = g.gelu(a);
                weighted_sum(g, ge, 0.9)
            },
            weights(3, 5, 0.2),
        );
    }

    #[test]
    fn grad_row_bias_and_scale() {
        let a0 = weights(4, 3, 0.4);
        fd_check(
            move |g, row| {
                let a = g.constant(a0.clone());
                let m = g.mul_row(a, row).unwrap();
                let s = g.add_row(m, row).unwrap();
                let s = g.scale(s, -1.7);
                let sc = g.sum_cols(s);
                let sq = g.mul(sc, sc).unwrap();
                g.sum(sq)
            },
            weights(1, 3, 1.3),
        );
    }

    #[test]
    fn grad_structural_ops() {
        fd_check(
            |g, x| {
                let a = g.slice_rows(x, 1, 3).unwrap();
                let a = g.slice_cols(a, 0, 2).unwrap();
                let b = g.slice_cols(x, 0, 2).unwrap();
                let c = g.gather_rows(x, &[0, 0, 3]).unwrap();
                let c = g.slice_cols(c, 1, 3).unwrap();
                let ab = g.concat_rows(&[a, b, c]).unwrap();
                let cc = g.concat_cols(&[ab, ab]).unwrap();
                let p = g.pick(x, &[(0, 1), (3, 2), (0, 1)]).unwrap();
                let ps = g.sum(p);
                let w = weighted_sum(g, cc, 0.8);
                let m = g.mul(ps, w).unwrap();
                g.add(m, w).unwrap()
            },
            weights(4, 3, 0.6),
        );
    }

    #[test]
    fn grad_im2col() {
        fd_check(
            |g, x| {
                let u = g.im2col(x, 5, 2, 2).unwrap();
                let sq = g.mul(u, u).unwrap();
                weighted_sum(g, sq, 0.2)
            },
            weights(7, 2, 0.3),
        );
    }

    #[test]
    fn grad_masked_softmax() {
        let mask = array![[0.0, f64::NEG_INFINITY], [0.0, 0.0]];
        let c = array![[1.0, 0.0], [0.5, 2.0]];
        fd_check(
            move |g, x| {
                let m = g.add_const(x, &mask).unwrap();
                let p = g.softmax_rows(m);
                let p = g.mul_const(p, c.clone()).unwrap();
                weighted_sum(g, p, 0.5)
            },
            weights(2, 2, 0.1),
        );
    }

    #[test]
    fn im2col_layout() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0], [2.0], [3.0], [4.0]]);
        let u = g.im2col(x, 5, 2, 2).unwrap();
        assert_eq!(
            g.value(u),
            &array![[0.0, 0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0, 0.0]]
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        let c = g.constant(array![[3.0, 4.0]]);
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[3.0, 4.0]]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn conv_length_formula() {
        assert_eq!(conv_out_len(3000, 5, 2, 2), 1500);
        assert_eq!(conv_out_len(1, 5, 2, 2), 1);
        assert_eq!(conv_out_len(0, 5, 2, 2), 0);
    }
}
