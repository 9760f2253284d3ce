use std::collections::BTreeMap;

use super::Matrix;
use crate::error::{Error, Result};

/// Lower/upper bound applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identity of a trainable parameter; gradients are keyed by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulRowBroadcast(Var, Var),
    Affine { x: Var, scale: f64 },
    Pow { x: Var, exponent: f64 },
    Ln(Var),
    LnClamped(Var),
    Exp(Var),
    Gather { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    TopkMeanRows { x: Var, picks: Vec<Vec<usize>> },
    ColumnsMean { x: Var, cols: Vec<usize> },
    NormalizeCols(Var),
    ConcatCols(Vec<Var>),
    Gram(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Wengert list for reverse-mode differentiation.
///
/// Every operation appends one node holding its forward value. `backward`
/// walks the list in exact reverse order of recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_var: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient with respect to a registered parameter.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    /// Gradient with respect to any recorded variable.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Matrix> {
        &self.params
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> Result<Var> {
        self.push(value, Op::Param(id), "param")
    }

    /// Same-length 1D convolution with zero padding.
    ///
    /// `weight` is `out x (in * kernel)`, laid out `[o][i * kernel + j]`;
    /// `bias` is `out x 1`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, kernel: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::invalid("kernel", format!("must be odd, got {kernel}")));
        }
        let (d_in, t_len) = x.shape();
        let d_out = w.rows();
        if w.cols() != d_in * kernel {
            return Err(Error::dims(
                "conv1d",
                format!("weight {d_out}x{} (in={d_in}, kernel={kernel})", d_in * kernel),
                format!("weight {}x{}", w.rows(), w.cols()),
            ));
        }
        if b.shape() != (d_out, 1) {
            return Err(Error::dims("conv1d", format!("bias {d_out}x1"), format!("bias {}x{}", b.rows(), b.cols())));
        }
        if t_len == 0 {
            return Err(Error::dims("conv1d", "T >= 1", "T = 0"));
        }
        let out = conv1d_forward(x, w, b, kernel);
        self.push(out, Op::Conv1d { input, weight, bias, kernel }, "conv1d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (ma, mb) = (self.value(a), self.value(b));
        if !ma.same_shape(mb) {
            return Err(Error::dims(op, format!("{:?}", ma.shape()), format!("{:?}", mb.shape())));
        }
        let data = ma.as_slice().iter().zip(mb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::new(ma.rows(), ma.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b), "div")
    }

    /// `out[r][t] = a[r][t] * b[0][t]` for `a: R x T`, `b: 1 x T`.
    pub fn mul_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if mb.rows() != 1 || mb.cols() != ma.cols() {
            return Err(Error::dims(
                "mul_row_broadcast",
                format!("1x{}", ma.cols()),
                format!("{}x{}", mb.rows(), mb.cols()),
            ));
        }
        let mut out = ma.clone();
        for r in 0..ma.rows() {
            for t in 0..ma.cols() {
                out.set(r, t, ma.get(r, t) * mb.get(0, t));
            }
        }
        self.push(out, Op::MulRowBroadcast(a, b), "mul_row_broadcast")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.affine(x, k, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    /// Elementwise power for nonnegative inputs.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if exponent == 0.0 { 1.0 } else { v.max(0.0).powf(exponent) });
        self.push(out, Op::Pow { x, exponent }, "pow")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Ln(x), "ln")
    }

    /// `ln(clamp(x, PROB_EPS, 1 - PROB_EPS))`.
    pub fn ln_prob(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS).ln());
        self.push(out, Op::LnClamped(x), "ln_prob")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    /// Picks entries by `(row, col)` into a `1 x n` row vector.
    pub fn gather(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let m = self.value(x);
        let mut index = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= m.rows() || c >= m.cols() {
                return Err(Error::dims("gather", format!("index < {:?}", m.shape()), format!("({r}, {c})")));
            }
            index.push(r * m.cols() + c);
        }
        let data: Vec<f64> = index.iter().map(|&i| m.as_slice()[i]).collect();
        self.push(Matrix::row_vector(data), Op::Gather { x, index }, "gather")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Matrix::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        if m.is_empty() {
            return Err(Error::invalid("mean", "empty input"));
        }
        let s = m.sum() / m.len() as f64;
        self.push(Matrix::scalar(s), Op::Mean(x), "mean")
    }

    /// Per row, mean of the `k` largest entries. Returns `rows x 1`.
    ///
    /// Ties are resolved toward the earlier column so the selected index set
    /// is deterministic.
    pub fn topk_mean_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let m = self.value(x);
        if k == 0 || k > m.cols() {
            return Err(Error::invalid("k", format!("need 1 <= k <= {}, got {k}", m.cols())));
        }
        let mut picks = Vec::with_capacity(m.rows());
        let mut out = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k);
            out.push(order.iter().map(|&i| row[i]).sum::<f64>() / k as f64);
            picks.push(order);
        }
        self.push(Matrix::column_vector(out), Op::TopkMeanRows { x, picks }, "topk_mean_rows")
    }

    /// Mean of the listed columns (repeats allowed). Returns `rows x 1`.
    pub fn columns_mean(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let m = self.value(x);
        if cols.is_empty() {
            return Err(Error::invalid("cols", "empty column set"));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= m.cols()) {
            return Err(Error::dims("columns_mean", format!("column < {}", m.cols()), bad.to_string()));
        }
        let n = cols.len() as f64;
        let out: Vec<f64> = (0..m.rows())
            .map(|r| cols.iter().map(|&c| m.get(r, c)).sum::<f64>() / n)
            .collect();
        self.push(Matrix::column_vector(out), Op::ColumnsMean { x, cols: cols.to_vec() }, "columns_mean")
    }

    /// L2-normalizes every column.
    pub fn normalize_cols(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        let mut out = m.clone();
        for c in 0..m.cols() {
            let norm = m.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonFinite("normalize_cols: zero-norm column".into()));
            }
            for r in 0..m.rows() {
                out.set(r, c, m.get(r, c) / norm);
            }
        }
        self.push(out, Op::NormalizeCols(x), "normalize_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::invalid("parts", "nothing to concatenate")),
        };
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::dims("concat_cols", format!("{rows} rows"), format!("{} rows", m.rows())));
            }
            for r in 0..rows {
                for c in 0..m.cols() {
                    out.set(r, offset + c, m.get(r, c));
                }
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// `x^T x`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        let n = m.cols();
        let mut out = Matrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let dot: f64 = (0..m.rows()).map(|r| m.get(r, a) * m.get(r, b)).sum();
                out.set(a, b, dot);
                out.set(b, a, dot);
            }
        }
        self.push(out, Op::Gram(x), "gram")
    }

    /// Reverse pass from the scalar `loss`, seeded with gradient `seed`.
    pub fn backward_with(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(seed));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::Conv1d { input, weight, bias, kernel } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (gx, gw, gb) = conv1d_backward(x, w, &g, *kernel);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = zip(&g, xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip(&g, y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |gi, bi| gi * bi);
                    let gb = zip(&g, self.value(*a), |gi, ai| gi * ai);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = zip(&g, bv, |gi, bi| gi / bi);
                    let mut gb = zip(&g, y, |gi, yi| -gi * yi);
                    for (v, bi) in gb.as_mut_slice().iter_mut().zip(bv.as_slice()) {
                        *v /= bi;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRowBroadcast(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = Matrix::zeros(1, bv.cols());
                    for r in 0..av.rows() {
                        for t in 0..av.cols() {
                            ga.set(r, t, g.get(r, t) * bv.get(0, t));
                            gb.set(0, t, gb.get(0, t) + g.get(r, t) * av.get(r, t));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine { x, scale } => {
                    let k = *scale;
                    accumulate(&mut grads, *x, g.map(|v| v * k));
                }
                Op::Pow { x, exponent } => {
                    let p = *exponent;
                    let gx = zip(&g, self.value(*x), |gi, xi| {
                        if p == 0.0 {
                            0.0
                        } else if xi <= 0.0 {
                            if p == 1.0 { gi } else { 0.0 }
                        } else {
                            gi * p * xi.powf(p - 1.0)
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Ln(x) => {
                    let gx = zip(&g, self.value(*x), |gi, xi| gi / xi);
                    accumulate(&mut grads, *x, gx);
                }
                Op::LnClamped(x) => {
                    let gx = zip(&g, self.value(*x), |gi, xi| {
                        if xi > PROB_EPS && xi < 1.0 - PROB_EPS { gi / xi } else { 0.0 }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = zip(&g, y, |gi, yi| gi * yi);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let data = gx.as_mut_slice();
                    for (k, &i) in index.iter().enumerate() {
                        data[i] += g.get(0, k);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let v = g.get(0, 0) / (r * c) as f64;
                    accumulate(&mut grads, *x, Matrix::filled(r, c, v));
                }
                Op::TopkMeanRows { x, picks } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, cols) in picks.iter().enumerate() {
                        let share = g.get(r, 0) / cols.len() as f64;
                        for &c in cols {
                            gx.set(r, c, gx.get(r, c) + share);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ColumnsMean { x, cols } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let n = cols.len() as f64;
                    for &c in cols {
                        for r in 0..xv.rows() {
                            gx.set(r, c, gx.get(r, c) + g.get(r, 0) / n);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::NormalizeCols(x) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for c in 0..xv.cols() {
                        let norm = xv.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let proj: f64 = (0..xv.rows()).map(|r| y.get(r, c) * g.get(r, c)).sum();
                        for r in 0..xv.rows() {
                            gx.set(r, c, (g.get(r, c) - y.get(r, c) * proj) / norm);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gp.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Gram(x) => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut gx = Matrix::zeros(xv.rows(), n);
                    for r in 0..xv.rows() {
                        for a in 0..n {
                            let mut acc = 0.0;
                            for b in 0..n {
                                acc += xv.get(r, b) * (g.get(a, b) + g.get(b, a));
                            }
                            gx.set(r, a, acc);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }

        let mut params: BTreeMap<ParamId, Matrix> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                match params.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(id, g);
                    }
                }
            }
        }
        Ok(Gradients { by_var: grads, params })
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with(loss, 1.0)
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn conv1d_forward(x: &Matrix, w: &Matrix, b: &Matrix, kernel: usize) -> Matrix {
    let (d_in, t_len) = x.shape();
    let d_out = w.rows();
    let pad = kernel / 2;
    let mut out = Matrix::zeros(d_out, t_len);
    for o in 0..d_out {
        let wrow = w.row(o);
        let bias = b.get(o, 0);
        for t in 0..t_len {
            let mut acc = bias;
            for i in 0..d_in {
                let xrow = x.row(i);
                for j in 0..kernel {
                    let src = t + j;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    acc += wrow[i * kernel + j] * xrow[src - pad];
                }
            }
            out.set(o, t, acc);
        }
    }
    out
}

fn conv1d_backward(x: &Matrix, w: &Matrix, g: &Matrix, kernel: usize) -> (Matrix, Matrix, Matrix) {
    let (d_in, t_len) = x.shape();
    let d_out = w.rows();
    let pad = kernel / 2;
    let mut gx = Matrix::zeros(d_in, t_len);
    let mut gw = Matrix::zeros(d_out, d_in * kernel);
    let mut gb = Matrix::zeros(d_out, 1);
    for o in 0..d_out {
        let grow = g.row(o);
        gb.set(o, 0, grow.iter().sum());
        for i in 0..d_in {
            for j in 0..kernel {
                let widx = i * kernel + j;
                let wv = w.get(o, widx);
                let mut acc = 0.0;
                for (t, &gy) in grow.iter().enumerate() {
                    let src = t + j;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let s = src - pad;
                    acc += gy * x.get(i, s);
                    gx.set(i, s, gx.get(i, s) + gy * wv);
                }
                gw.set(o, widx, gw.get(o, widx) + acc);
            }
        }
    }
    (gx, gw, gb)
}
