//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar (1x1) result walks the record in reverse and
//! returns the gradient of that scalar with respect to every recorded node.
//! Constants are recorded too but never receive gradients.
//!
//! The op set is deliberately small and tailored to the models in this crate:
//! dense layers, gated recurrences, per-group softmax over graph edges and
//! sparse weighted aggregation.

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var, f64),
    Powf(Var, f64),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    PickCols(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    Spmm {
        weights: Var,
        input: Var,
        dst: Vec<usize>,
        src: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of the given shape when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn record(&self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let needs = self.needs(parents);
        self.push(value, op, needs)
    }

    /// Trainable input.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.constant(Matrix::zeros((rows, cols)))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        self.record(out, op, &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.ncols(),
                vb.nrows(),
                "matmul {:?} x {:?}",
                va.dim(),
                vb.dim()
            );
            va.dot(&*vb)
        };
        self.record(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "add shape");
            &*va + &*vb
        };
        self.record(out, Op::Add(a, b), &[a, b])
    }

    /// `a [n x m] + row [1 x m]`, broadcasting the row.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let (va, vr) = (self.value(a), self.value(row));
            assert_eq!(vr.nrows(), 1, "add_row expects a single row");
            assert_eq!(va.ncols(), vr.ncols(), "add_row width");
            &*va + &*vr
        };
        self.record(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "sub shape");
            &*va - &*vb
        };
        self.record(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "mul shape");
            &*va * &*vb
        };
        self.record(out, Op::Mul(a, b), &[a, b])
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let out = {
            let (va, vc) = (self.value(a), self.value(col));
            assert_eq!(vc.dim(), (va.nrows(), 1), "mul_col shape");
            &*va * &*vc
        };
        self.record(out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::Log(a, floor))
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.max(0.0).powf(p), Op::Powf(a, p))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.record(Matrix::from_elem((1, 1), s), Op::Sum(a), &[a])
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&self, a: Var) -> Var {
        let m = {
            let va = self.value(a);
            va.sum() / va.len() as f64
        };
        self.record(Matrix::from_elem((1, 1), m), Op::Mean(a), &[a])
    }

    /// Per-row sum, `[n x m] -> [n x 1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.record(out, Op::SumCols(a), &[a])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.record(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ")
        };
        self.record(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.record(out, Op::SliceCols(a, start, end), &[a])
    }

    /// Row `k` of the output is row `idx[k]` of `a`. Indices may repeat.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let out = {
            let va = self.value(a);
            va.select(Axis(0), idx)
        };
        self.record(out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.len(), rows * cols, "reshape size");
            let flat: Vec<f64> = va.iter().copied().collect();
            Matrix::from_shape_vec((rows, cols), flat).expect("reshape")
        };
        self.record(out, Op::Reshape(a), &[a])
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = {
            let mut m = self.value(a).to_owned();
            for mut row in m.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                row.mapv_inplace(|x| x - lse);
            }
            m
        };
        self.record(out, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a));
        self.record(out, Op::SoftmaxRows(a), &[a])
    }

    /// `[n x m] -> [n x 1]`, picking column `idx[i]` from row `i`.
    pub fn pick_cols(&self, a: Var, idx: &[usize]) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.nrows(), idx.len(), "pick_cols length");
            Matrix::from_shape_fn((idx.len(), 1), |(i, _)| va[[i, idx[i]]])
        };
        self.record(out, Op::PickCols(a, idx.to_vec()), &[a])
    }

    /// Softmax of a column vector `[e x 1]` within groups: entries sharing a
    /// group id are normalized together.
    pub fn segment_softmax(&self, a: Var, groups: &[usize]) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.dim(), (groups.len(), 1), "segment_softmax shape");
            let n_groups = groups.iter().max().map_or(0, |g| g + 1);
            let mut mx = vec![f64::NEG_INFINITY; n_groups];
            for (e, &g) in groups.iter().enumerate() {
                mx[g] = mx[g].max(va[[e, 0]]);
            }
            let mut denom = vec![0.0; n_groups];
            let mut out = Matrix::zeros((groups.len(), 1));
            for (e, &g) in groups.iter().enumerate() {
                let x = (va[[e, 0]] - mx[g]).exp();
                out[[e, 0]] = x;
                denom[g] += x;
            }
            for (e, &g) in groups.iter().enumerate() {
                out[[e, 0]] /= denom[g];
            }
            out
        };
        self.record(out, Op::SegmentSoftmax(a, groups.to_vec()), &[a])
    }

    /// Sparse weighted aggregation: `out[dst[e]] += weights[e] * input[src[e]]`
    /// with `out` having `n_out` rows.
    pub fn spmm(
        &self,
        weights: Var,
        input: Var,
        dst: &[usize],
        src: &[usize],
        n_out: usize,
    ) -> Var {
        assert_eq!(dst.len(), src.len(), "spmm index lengths");
        let out = {
            let (w, x) = (self.value(weights), self.value(input));
            assert_eq!(w.dim(), (dst.len(), 1), "spmm weights shape");
            let mut out = Matrix::zeros((n_out, x.ncols()));
            for e in 0..dst.len() {
                let we = w[[e, 0]];
                let mut row = out.row_mut(dst[e]);
                row.scaled_add(we, &x.row(src[e]));
            }
            out
        };
        self.record(
            out,
            Op::Spmm {
                weights,
                input,
                dst: dst.to_vec(),
                src: src.to_vec(),
            },
            &[weights, input],
        )
    }

    /// Reverse pass from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].needs_grad;
            let mut acc = |v: Var, d: Matrix| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(a, r) => {
                    if wants(*r) {
                        acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g.clone());
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        acc(*b, -&g);
                    }
                    acc(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if wants(*b) {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::MulCol(a, c) => {
                    if wants(*a) {
                        acc(*a, &g * val(*c));
                    }
                    if wants(*c) {
                        let prod = &g * val(*a);
                        acc(*c, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                }
                Op::Scale(a, k) => acc(*a, &g * *k),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Sigmoid(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::Log(a, floor) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        *d = if x > *floor { *d / x } else { 0.0 };
                    });
                    acc(*a, d);
                }
                Op::Powf(a, p) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        let x = x.max(0.0);
                        let deriv = if x > 0.0 {
                            p * x.powf(p - 1.0)
                        } else if *p == 1.0 {
                            1.0
                        } else {
                            0.0
                        };
                        *d *= deriv;
                    });
                    acc(*a, d);
                }
                Op::Sqrt(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 };
                    });
                    acc(*a, d);
                }
                Op::Square(a) => acc(*a, &g * val(*a) * 2.0),
                Op::Sum(a) => {
                    let shape = val(*a).dim();
                    acc(*a, Matrix::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let shape = val(*a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    acc(*a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
                Op::SumCols(a) => {
                    let shape = val(*a).dim();
                    let d = Matrix::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if wants(*p) {
                            acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        if wants(*p) {
                            acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(k);
                    }
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Matrix::from_shape_vec(shape, flat).expect("reshape grad"));
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = g.clone();
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let gs = drow.sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d -= y.exp() * gs);
                    }
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = g.clone();
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d = y * (*d - dot));
                    }
                    acc(*a, d);
                }
                Op::PickCols(a, idx) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    for (i, &c) in idx.iter().enumerate() {
                        d[[i, c]] += g[[i, 0]];
                    }
                    acc(*a, d);
                }
                Op::SegmentSoftmax(a, groups) => {
                    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
                    let y = &node.value;
                    let mut dot = vec![0.0; n_groups];
                    for (e, &gr) in groups.iter().enumerate() {
                        dot[gr] += g[[e, 0]] * y[[e, 0]];
                    }
                    let d = Matrix::from_shape_fn((groups.len(), 1), |(e, _)| {
                        y[[e, 0]] * (g[[e, 0]] - dot[groups[e]])
                    });
                    acc(*a, d);
                }
                Op::Spmm {
                    weights,
                    input,
                    dst,
                    src,
                } => {
                    let (w, x) = (val(*weights), val(*input));
                    if wants(*weights) {
                        let d = Matrix::from_shape_fn((dst.len(), 1), |(e, _)| {
                            g.row(dst[e]).dot(&x.row(src[e]))
                        });
                        acc(*weights, d);
                    }
                    if wants(*input) {
                        let mut d = Matrix::zeros(x.dim());
                        for e in 0..dst.len() {
                            let mut row = d.row_mut(src[e]);
                            row.scaled_add(w[[e, 0]], &g.row(dst[e]));
                        }
                        acc(*input, d);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        row.mapv_inplace(|x| (x - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}
