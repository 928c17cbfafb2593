//! Dense row-major tensors and a reverse-mode tape.
//!
//! Every primitive records its inputs plus whatever partials it needs on the
//! tape; [`Tape::backward`] walks the records in exact reverse order. Only
//! 2-D tensors are used by the model; scalars are `[1, 1]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Self::full(vec![1, 1], value)
    }

    pub fn row(values: Vec<S>) -> Self {
        let n = values.len();
        Self { shape: vec![1, n], data: values, requires_grad: false, grad: None }
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.gen_range(lo..hi))).collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn accumulate_grad(&mut self, g: &[S]) {
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); g.len()]);
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<S>),
    Scale(Var, S),
    MulScalar(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var, S),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Gelu(Var),
    NormalizeRows(Var, Vec<S>),
    CrossEntropy { logits: Var, target: usize, temperature: S, probs: Vec<S> },
    KlToTeacher { logits: Var, support: Vec<usize>, teacher: Vec<S>, temperature: S, probs: Vec<S> },
    Sum(Var),
}

struct Node<S: Scalar> {
    shape: [usize; 2],
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

// out[m,n] += a[m,k] · b[k,n]
fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] · b[n,k]ᵀ
fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

// out[k,n] += a[m,k]ᵀ · b[m,n]
fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let a_pi = a[p * k + i];
            if a_pi == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_pi * bv;
            }
        }
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x);
    (y, dy)
}

fn softmax_in_place<S: Scalar>(row: &mut [S], temperature: S) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Records primitive operations for one forward/backward pass.
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: [usize; 2], value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape[0] * shape[1], value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        let shape = [t.rows(), t.cols()];
        self.push(shape, t.data.clone(), Op::Leaf, requires_grad)
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, true)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push([rows, cols], data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.to_vec(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push([m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push([m, n], out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let [m, n] = self.shape(a);
        let src = self.value(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push([n, m], out, Op::Transpose(a), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Vec<S>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a), out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a), out, Op::Mul(a, b), rg))
    }

    /// Adds a `[1, n]` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(bias) != [1, n] {
            return Err(shape_err("add_row_bias", format!("[{m},{n}] + {:?}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out: Vec<S> = self.value(x).iter().enumerate().map(|(k, &v)| v + b[k % n]).collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push([m, n], out, Op::AddRowBias(x, bias), rg))
    }

    /// Adds a constant matrix (no gradient to the constant), e.g. an attention mask.
    pub fn add_const(&mut self, x: Var, c: &[S]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("add_const", format!("{} vs {}", self.value(x).len(), c.len())));
        }
        let out = self.value(x).iter().zip(c).map(|(&a, &b)| a + b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x), out, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant matrix, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, c: Vec<S>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("mul_const", format!("{} vs {}", self.value(x).len(), c.len())));
        }
        let out = self.value(x).iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x), out, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x), out, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by a `[1, 1]` variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(shape_err("mul_scalar", format!("scale shape {:?}", self.shape(s))));
        }
        let c = self.scalar_value(s);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x), out, Op::MulScalar(x, s), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let n = self.shape(first)[1];
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if c != n {
                return Err(shape_err("concat_rows", format!("column count {c} vs {n}")));
            }
            out.extend_from_slice(self.value(p));
            m += r;
        }
        let rg = self.rg(parts);
        Ok(self.push([m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start + len > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push([len, n], out, Op::SliceRows(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let m = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [r, c] = self.shape(p);
            if r != m {
                return Err(shape_err("concat_cols", format!("row count {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push([m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start + len > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push([m, len], out, Op::SliceCols(x, start), rg))
    }

    /// Embedding lookup: rows `idx` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push([idx.len(), n], out, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Row-wise softmax of `x / temperature`, stabilized by the row max.
    pub fn softmax_rows(&mut self, x: Var, temperature: S) -> Result<Var> {
        if !(temperature > S::zero()) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
        }
        let [m, n] = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row, temperature);
        }
        let rg = self.rg(&[x]);
        Ok(self.push([m, n], out, Op::SoftmaxRows(x, temperature), rg))
    }

    /// Per-row standardization followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(gamma) != [1, n] || self.shape(beta) != [1, n] {
            return Err(shape_err("layer_norm", format!("affine params must be [1,{n}]")));
        }
        let nn = S::of_usize(n);
        let eps = S::of(LN_EPS);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let src = self.value(x);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat.iter().enumerate().map(|(k, &h)| g[k % n] * h + b[k % n]).collect();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push([m, n], out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x), out, Op::Gelu(x), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        let src = self.value(x);
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in src.chunks(n.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(norm > S::zero()) || !norm.is_finite() {
                return Err(Error::DegenerateLatent);
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.rg(&[x]);
        Ok(self.push([m, n], out, Op::NormalizeRows(x, norms), rg))
    }

    /// `-ln softmax(z / τ)[target]` for a `[1, n]` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, temperature: S) -> Result<Var> {
        let [m, n] = self.shape(logits);
        if m != 1 || target >= n {
            return Err(shape_err("cross_entropy", format!("logits [{m},{n}], target {target}")));
        }
        if !(temperature > S::zero()) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = z.iter().map(|&v| ((v - max) / temperature).exp()).sum::<S>().ln();
        let loss = -((z[target] - max) / temperature - lse);
        let mut probs = z.to_vec();
        softmax_in_place(&mut probs, temperature);
        let rg = self.rg(&[logits]);
        Ok(self.push([1, 1], vec![loss], Op::CrossEntropy { logits, target, temperature, probs }, rg))
    }

    /// `D_KL(q ‖ p)` where `p` is the softmax of `z / τ` restricted to the teacher's
    /// support columns and renormalized. The teacher is a constant.
    pub fn kl_to_fixed_teacher(
        &mut self,
        logits: Var,
        support: &[usize],
        teacher: &[S],
        temperature: S,
    ) -> Result<Var> {
        let [m, n] = self.shape(logits);
        if m != 1 || support.len() != teacher.len() || support.iter().any(|&c| c >= n) {
            return Err(shape_err("kl_to_fixed_teacher", format!("logits [{m},{n}], support {:?}", support)));
        }
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty teacher support".into()));
        }
        if !(temperature > S::zero()) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
        }
        let z = self.value(logits);
        let sub: Vec<S> = support.iter().map(|&c| z[c]).collect();
        let max = sub.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = sub.iter().map(|&v| ((v - max) / temperature).exp()).sum::<S>().ln();
        let mut loss = S::zero();
        for (&q, &v) in teacher.iter().zip(&sub) {
            if q > S::zero() {
                let log_p = (v - max) / temperature - lse;
                loss += q * (q.ln() - log_p);
            }
        }
        let mut probs = sub;
        softmax_in_place(&mut probs, temperature);
        let rg = self.rg(&[logits]);
        let op = Op::KlToTeacher { logits, support: support.to_vec(), teacher: teacher.to_vec(), temperature, probs };
        Ok(self.push([1, 1], vec![loss], op, rg))
    }

    /// Sum of all elements as a `[1, 1]` value.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push([1, 1], vec![total], Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.shape(loss) != [1, 1] {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let [m, n] = node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.shape(*a)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let k = self.shape(*a)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(g, av, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    // node is [m, n], input is [n, m]
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::AddConst(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * c[k];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
                }
            }
            Op::MulScalar(x, s) => {
                let c = self.scalar_value(*s);
                let xv = self.value(*x);
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<S>();
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, &b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let off = start * n;
                    gx[off..off + g.len()].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols(x, start) => {
                let width = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * width + start + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gt[i * n..(i + 1) * n];
                        dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::SoftmaxRows(x, temperature) => {
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - dot) / *temperature;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for k in 0..g.len() {
                        gg[k % n] += g[k] * xhat[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for k in 0..g.len() {
                        gb[k % n] += g[k];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nn = S::of_usize(n);
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let xh = &xhat[row.clone()];
                        let dxh: Vec<S> = (0..n).map(|j| g[i * n + j] * gam[j]).collect();
                        let sum_d: S = dxh.iter().copied().sum();
                        let sum_dx: S = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] / nn * (nn * dxh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu_parts(xv[k]).1;
                    }
                }
            }
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, temperature, probs } => {
                if let Some(gz) = self.acc(grads, *logits) {
                    for (j, &p) in probs.iter().enumerate() {
                        let onehot = if j == *target { S::one() } else { S::zero() };
                        gz[j] += g[0] * (p - onehot) / *temperature;
                    }
                }
            }
            Op::KlToTeacher { logits, support, teacher, temperature, probs } => {
                let mass: S = teacher.iter().copied().sum();
                if let Some(gz) = self.acc(grads, *logits) {
                    for ((&c, &q), &p) in support.iter().zip(teacher).zip(probs) {
                        gz[c] += g[0] * (mass * p - q) / *temperature;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<S, F>(f: F, x: &Tensor<S>, h: S) -> Tensor<S>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> S,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    let two_h = h + h;
    for k in 0..x.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let up = f(&probe);
        probe.data[k] = orig - h;
        let down = f(&probe);
        probe.data[k] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor { shape: x.shape.clone(), data: grad, requires_grad: false, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![r, c], -1.0, 1.0, &mut rng)
    }

    /// Reduces `out` to a scalar with fixed random weights so every output
    /// element contributes a distinct gradient.
    fn project(tape: &mut Tape<f64>, out: Var) -> Var {
        let [m, n] = tape.shape(out);
        let w = rand_t(m, n, 999);
        let wv = tape.constant(&w);
        let p = tape.mul(out, wv).unwrap();
        tape.sum(p)
    }

    fn gradcheck<F>(inputs: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let eval = |xs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(inputs);
        let grads = tape.backward(out).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut xs = inputs.to_vec();
                    xs[i] = probe.clone();
                    let (t, _, o) = eval(&xs);
                    t.scalar_value(o)
                },
                x,
                1e-4,
            );
            let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.len()]);
            let diff: f64 = analytic.iter().zip(numeric.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn: f64 = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = diff / (na + nn).max(1e-12);
            assert!(rel <= 1e-4, "input {i}: relative error {rel:e}");
        }
    }

    #[test]
    fn matmul_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(&Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[17.0, 39.0]);
        let d = tape.matmul_nt(a, a).unwrap();
        assert_eq!(tape.value(d), &[5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&rand_t(2, 3, 1));
        let b = tape.constant(&rand_t(2, 3, 2));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn grad_matmul() {
        gradcheck(&[rand_t(3, 4, 1), rand_t(4, 2, 2)], |t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            project(t, o)
        });
        gradcheck(&[rand_t(3, 4, 3), rand_t(5, 4, 4)], |t, v| {
            let o = t.matmul_nt(v[0], v[1]).unwrap();
            project(t, o)
        });
    }

    #[test]
    fn grad_elementwise() {
        gradcheck(&[rand_t(2, 3, 5), rand_t(2, 3, 6)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.mul(a, v[1]).unwrap();
            let c = t.sub(b, v[0]).unwrap();
            let d = t.scale(c, 0.7);
            let e = t.transpose(d);
            project(t, e)
        });
    }

    #[test]
    fn grad_bias_and_scalar() {
        gradcheck(&[rand_t(3, 4, 7), rand_t(1, 4, 8), rand_t(1, 1, 9)], |t, v| {
            let a = t.add_row_bias(v[0], v[1]).unwrap();
            let b = t.mul_scalar(a, v[2]).unwrap();
            let c = t.mul_const(b, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.5]).unwrap();
            let d = t.add_const(c, &[1.0; 12]).unwrap();
            project(t, d)
        });
    }

    #[test]
    fn grad_slicing() {
        gradcheck(&[rand_t(3, 4, 10), rand_t(2, 4, 11)], |t, v| {
            let a = t.concat_rows(&[v[0], v[1]]).unwrap();
            let b = t.slice_rows(a, 1, 3).unwrap();
            let l = t.slice_cols(b, 0, 1).unwrap();
            let r = t.slice_cols(b, 1, 3).unwrap();
            let c = t.concat_cols(&[r, l]).unwrap();
            let d = t.gather_rows(c, &[2, 0, 0, 1]).unwrap();
            project(t, d)
        });
    }

    #[test]
    fn grad_softmax() {
        gradcheck(&[rand_t(3, 5, 12)], |t, v| {
            let s = t.softmax_rows(v[0], 0.6).unwrap();
            project(t, s)
        });
    }

    #[test]
    fn grad_layer_norm() {
        gradcheck(&[rand_t(3, 6, 13), rand_t(1, 6, 14), rand_t(1, 6, 15)], |t, v| {
            let s = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, s)
        });
    }

    #[test]
    fn grad_gelu_and_normalize() {
        gradcheck(&[rand_t(2, 5, 16)], |t, v| {
            let g = t.gelu(v[0]);
            let n = t.normalize_rows(g).unwrap();
            project(t, n)
        });
    }

    #[test]
    fn grad_losses() {
        gradcheck(&[rand_t(1, 6, 17)], |t, v| t.cross_entropy(v[0], 4, 0.8).unwrap());
        gradcheck(&[rand_t(1, 6, 18)], |t, v| t.kl_to_fixed_teacher(v[0], &[5, 1, 2], &[0.6, 0.3, 0.1], 1.7).unwrap());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::<f64>::row(vec![1e4, -1e4, 1e4 - 1.0, 0.0]));
        let p = tape.softmax_rows(z, 1.0).unwrap();
        let out = tape.value(p);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((out[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        let ce = tape.cross_entropy(z, 1, 1.0).unwrap();
        assert!((tape.scalar_value(ce) - 2e4 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
    }

    #[test]
    fn gradients_accumulate_linearly() {
        // d(a·x + b·x)/dx == d(a·x)/dx + d(b·x)/dx
        let x = rand_t(2, 3, 20);
        let a = rand_t(3, 1, 21);
        let b = rand_t(3, 1, 22);
        let grad_of = |ws: &[&Tensor<f64>]| {
            let mut t = Tape::new();
            let xv = t.param(&x);
            let mut terms = Vec::new();
            for w in ws {
                let wv = t.constant(w);
                let m = t.matmul(xv, wv).unwrap();
                terms.push(t.sum(m));
            }
            let mut total = terms[0];
            for &term in &terms[1..] {
                total = t.add(total, term).unwrap();
            }
            t.backward(total).unwrap().get(xv).unwrap().to_vec()
        };
        let both = grad_of(&[&a, &b]);
        let ga = grad_of(&[&a]);
        let gb = grad_of(&[&b]);
        for k in 0..both.len() {
            assert!((both[k] - ga[k] - gb[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(&rand_t(2, 2, 30));
        let p = t.param(&rand_t(2, 2, 31));
        let m = t.mul(c, p).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), t.value(c));
    }

    #[test]
    fn normalize_zero_row_is_error() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(&Tensor::zeros(vec![1, 3]));
        assert!(matches!(t.normalize_rows(z), Err(Error::DegenerateLatent)));
    }

    #[test]
    fn works_in_f32() {
        let mut t = Tape::<f32>::new();
        let z = t.param(&Tensor::row(vec![0.5f32, -0.25, 2.0]));
        let l = t.cross_entropy(z, 2, 1.0).unwrap();
        let g = t.backward(l).unwrap();
        let s: f32 = g.get(z).unwrap().iter().sum();
        assert!(s.abs() < 1e-6);
    }
}
