//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar walks the recorded nodes in reverse and
//! accumulates gradients into the [`ParamSet`] the parameter leaves came from.
//!
//! Broadcasting is limited to a row vector (`[m]` or `[1, m]`) against a
//! matrix `[n, m]`, which covers biases and shared per-step means.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.values[i * n + i] = 1.0;
        }
        out
    }

    /// Builds an `[n, m]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix (1 for scalars and vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Repeats a single row `n` times.
    pub fn repeat_rows(row: &[f64], n: usize) -> Self {
        let mut values = Vec::with_capacity(row.len() * n);
        for _ in 0..n {
            values.extend_from_slice(row);
        }
        Self {
            shape: vec![n, row.len()],
            values,
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a row repeated over the left operand's rows.
    RhsRow,
    LhsRow,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Tanh(Var),
    Silu(Var),
    Concat(Vec<Var>),
    Mean(Var),
    Sum(Var),
    SumLast(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
}

/// Operation recorder. Node order is a topological order of the DAG.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    let is_row = |s: &[usize]| s.len() == 1 || (s.len() == 2 && s[0] == 1);
    let last = |s: &[usize]| s.last().copied().unwrap_or(1);
    if a.len() == 2 && is_row(b) && last(b) == a[1] {
        return Ok((a.to_vec(), Broadcast::RhsRow));
    }
    if b.len() == 2 && is_row(a) && last(a) == b[1] {
        return Ok((b.to_vec(), Broadcast::LhsRow));
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn zip_broadcast(a: &DenseArray, b: &DenseArray, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Broadcast::Same => a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::RhsRow => {
            let m = b.values.len();
            a.values
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.values[i % m]))
                .collect()
        }
        Broadcast::LhsRow => {
            let m = a.values.len();
            b.values
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.values[i % m], y))
                .collect()
        }
    }
}

/// Sums a full-size gradient down to the shape of a broadcast row operand.
fn reduce_rows(grad: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, g) in grad.iter().enumerate() {
        out[i % m] += g;
    }
    out
}

fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sum of squares in index order, starting from zero. Shared by the taped
/// `square` + `sum_last` path and by plain evaluations that must agree bitwise.
pub fn sum_of_squares(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += v * v;
    }
    acc
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Records a constant (or differentiable input whose gradient is read
    /// back through [`Gradients::wrt`]).
    pub fn input(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a leaf holding the current value of a parameter.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let values = matmul_kernel(&self.value(a).values, &self.value(b).values, n, k, m);
        Ok(self.push(DenseArray { shape: vec![n, m], values }, Op::MatMul(a, b)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(DenseArray, Broadcast)> {
        let (shape, mode) = broadcast_rule(op, self.shape(a), self.shape(b))?;
        let values = zip_broadcast(self.value(a), self.value(b), mode, f);
        Ok((DenseArray { shape, values }, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b, mode)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b, mode)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b, mode)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let value = DenseArray {
            shape: src.shape.clone(),
            values: src.values.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).values.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(AutodiffError::NonPositiveLog(bad));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| x * scale + shift, Op::Affine(a, scale))
    }

    /// Elementwise clamp; gradient passes only where the value was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = DenseArray {
            shape: shape.to_vec(),
            values: src.values.clone(),
        };
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Concatenates rank-2 arrays with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                values.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            DenseArray {
                shape: vec![rows, total],
                values,
            },
            Op::Concat(parts.to_vec()),
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.values.len() as f64;
        let total: f64 = src.values.iter().sum();
        self.push(DenseArray::scalar(total / n), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).values.iter().sum();
        self.push(DenseArray::scalar(total), Op::Sum(a))
    }

    /// Sums a rank-2 `[n, m]` array over its last axis, giving `[n]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum_last",
                lhs: src.shape.clone(),
                rhs: vec![],
            });
        }
        let values: Vec<f64> = (0..src.rows())
            .map(|r| {
                let mut acc = 0.0;
                for &v in src.row(r) {
                    acc += v;
                }
                acc
            })
            .collect();
        Ok(self.push(DenseArray::vector(values), Op::SumLast(a)))
    }

    /// Runs reverse accumulation from a scalar `loss`, adding parameter
    /// gradients into `params` and returning gradients of input leaves.
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut inputs = Vec::new();

        fn acc(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
            match slot {
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                None => *slot = Some(delta),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => inputs.push((Var(idx), g)),
                Op::Param(id) => params.accumulate_gradient(*id, &g),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bv.values[p * m + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av.values[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let gb: Vec<f64> = g.iter().map(|x| sign * x).collect();
                    let (da, db) = match mode {
                        Broadcast::Same => (g, gb),
                        Broadcast::RhsRow => {
                            let m = self.nodes[b.0].value.len();
                            (g, reduce_rows(&gb, m))
                        }
                        Broadcast::LhsRow => {
                            let m = self.nodes[a.0].value.len();
                            (reduce_rows(&g, m), gb)
                        }
                    };
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Mul(a, b, mode) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let full_a = zip_broadcast(av, bv, *mode, |x, _| x);
                    let full_b = zip_broadcast(av, bv, *mode, |_, y| y);
                    let da_full: Vec<f64> = g.iter().zip(&full_b).map(|(g, y)| g * y).collect();
                    let db_full: Vec<f64> = g.iter().zip(&full_a).map(|(g, x)| g * x).collect();
                    let (da, db) = match mode {
                        Broadcast::Same => (da_full, db_full),
                        Broadcast::RhsRow => (da_full, reduce_rows(&db_full, bv.len())),
                        Broadcast::LhsRow => (reduce_rows(&da_full, av.len()), db_full),
                    };
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Tanh(a) => {
                    let y = &node.value.values;
                    let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value.values;
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Exp(a) => {
                    let y = &node.value.values;
                    let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Log(a) => {
                    let x = &self.nodes[a.0].value.values;
                    let d = g.iter().zip(x).map(|(g, x)| g / x).collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value.values;
                    let d = g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Affine(a, scale) => {
                    let d = g.iter().map(|g| g * scale).collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.0].value.values;
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads[a.0], d);
                }
                Op::Reshape(a) => acc(&mut grads[a.0], g),
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(&mut grads[p.0], d);
                        offset += w;
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads[a.0], vec![g[0]; n]);
                }
                Op::SumLast(a) => {
                    let m = self.nodes[a.0].value.cols();
                    let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, m)).collect();
                    acc(&mut grads[a.0], d);
                }
            }
        }
        Ok(Gradients { inputs })
    }
}

/// Gradients of input leaves produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to an input leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.iter().find(|(var, _)| *var == v).map(|(_, g)| g.as_slice())
    }
}

/// A trainable array with its gradient and AdamW moment slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    value: DenseArray,
    gradient: DenseArray,
    first_moment: DenseArray,
    second_moment: DenseArray,
}

impl Parameter {
    fn new(name: String, value: DenseArray) -> Self {
        let zeros = DenseArray::zeros(value.shape());
        Self {
            name,
            gradient: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &DenseArray {
        &self.value
    }

    pub fn gradient(&self) -> &DenseArray {
        &self.gradient
    }
}

/// Ordered collection of named parameters plus the optimizer step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> ParamId {
        self.params.push(Parameter::new(name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.params[id.0].value
    }

    pub fn gradient(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].gradient
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.gradient.values.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn accumulate_gradient(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.params[id.0].gradient.values;
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_gradients(&mut self, factor: f64) {
        for p in &mut self.params {
            p.gradient.values.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Flattened concatenation of all parameter values.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.values.iter().copied()).collect()
    }

    pub fn flat_gradients(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.gradient.values.iter().copied()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 2e-6,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }

    /// Applies one update using the gradients currently stored in `params`.
    pub fn step(&self, params: &mut ParamSet) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(AutodiffError::InvalidLearningRate(self.lr));
        }
        params.step += 1;
        let t = params.step as i32;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for p in &mut params.params {
            let n = p.value.values.len();
            for i in 0..n {
                let g = p.gradient.values[i];
                let m = b1 * p.first_moment.values[i] + (1.0 - b1) * g;
                let v = b2 * p.second_moment.values[i] + (1.0 - b2) * g * g;
                p.first_moment.values[i] = m;
                p.second_moment.values[i] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                let w = p.value.values[i] * decay;
                p.value.values[i] = w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
