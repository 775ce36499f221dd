//! Reverse-mode gradient tape over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates exact gradients into the [`ParamStore`]s that supplied the
//! parameter leaves.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { store: u64, name: String },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Silu(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    SegmentMean(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Min(Var, Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dense affine map `x W + b` shared by the tape and the inference path,
/// so both produce bit-identical activations.
pub(crate) fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = x.dot(w);
    y += b;
    y
}

pub(crate) fn silu_map(x: &Tensor) -> Tensor {
    x.mapv(silu)
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::numeric(format!("tape op {op:?}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Records the current value of parameter `name` from `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        self.push(
            value,
            Op::Param {
                store: store.uid(),
                name: name.to_string(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.0 {
            return Err(shape_err("matmul", da, db));
        }
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a 1×n row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(bias));
        if db.0 != 1 || db.1 != da.1 {
            return Err(shape_err("add_bias", da, db));
        }
        let mut value = self.value(a).clone();
        value += self.value(bias);
        self.push(value, Op::AddBias(a, bias))
    }

    /// `x W + b`, matching [`affine`] bit for bit.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(shape_err(op, da, db));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.dim(a) != c.dim() {
            return Err(shape_err("add_const", self.dim(a), c.dim()));
        }
        let value = self.value(a) + c;
        self.push(value, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: &[f64]) -> Result<Var> {
        let (r, _) = self.dim(a);
        if s.len() != r {
            return Err(Error::Contract(format!(
                "row_scale: {} factors for {r} rows",
                s.len()
            )));
        }
        let mut value = self.value(a).clone();
        for (mut row, &f) in value.axis_iter_mut(Axis(0)).zip(s) {
            row *= f;
        }
        self.push(value, Op::RowScale(a, s.to_vec()))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = silu_map(self.value(a));
        self.push(value, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Row sums as an r×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(a).sum() / n as f64;
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a))
    }

    /// Averages consecutive groups of `seg` rows: (g·seg)×n → g×n.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (r, c) = self.dim(a);
        if seg == 0 || r % seg != 0 {
            return Err(Error::Contract(format!(
                "segment_mean: {r} rows not divisible into segments of {seg}"
            )));
        }
        let src = self.value(a);
        let mut value = Array2::zeros((r / seg, c));
        for (g, mut out) in value.axis_iter_mut(Axis(0)).enumerate() {
            for i in 0..seg {
                out += &src.row(g * seg + i);
            }
            out /= seg as f64;
        }
        self.push(value, Op::SegmentMean(a, seg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, _) = self.dim(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of {r} rows"
            )));
        }
        let value = self.value(a).select(Axis(0), idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let r = self.dim(parts[0]).0;
        if parts.iter().any(|&p| self.dim(p).0 != r) {
            return Err(Error::Contract("concat_cols: row counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Contract(format!("concat_cols: {e}")))?;
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.dim(a);
        if start > end || end > c {
            return Err(Error::Contract(format!(
                "slice_cols: {start}..{end} out of {c} columns"
            )));
        }
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min", a, b)?;
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        self.push(value, Op::Min(a, b))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Accumulates d`loss`/dθ into every store whose parameters appear on the tape.
    ///
    /// Stores whose parameters do not occur are left untouched. Gradients are
    /// added to whatever the stores already hold.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(
                "backward called on a variable that is not on this tape".into(),
            ));
        }
        if self.dim(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.dim(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { store, name } => {
                    if let Some(s) = stores.iter_mut().find(|s| s.uid() == *store) {
                        if s.entry(name).map(|p| p.trainable).unwrap_or(false) {
                            s.accumulate_grad(name, &g)?;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::RowScale(a, s) => {
                    let mut ga = g;
                    for (mut row, &f) in ga.axis_iter_mut(Axis(0)).zip(s) {
                        row *= f;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gx, &x| {
                        let s = sigmoid(x);
                        *gx *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gx, &x| *gx *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g * self.value(*a) * 2.0;
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.dim(*a);
                    let mut ga = Array2::zeros((r, c));
                    for (mut row, &gr) in ga.axis_iter_mut(Axis(0)).zip(g.column(0)) {
                        row.fill(gr);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.dim(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let ga = Array2::from_elem(self.dim(*a), g[[0, 0]] / n);
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, seg) => {
                    let (r, c) = self.dim(*a);
                    let mut ga = Array2::zeros((r, c));
                    let inv = 1.0 / *seg as f64;
                    for (row_idx, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                        row.assign(&g.row(row_idx / seg));
                        row *= inv;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.dim(*a));
                    for (k, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.dim(p).1;
                        let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        acc(&mut grads, p, gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.dim(*a));
                    ga.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Min(a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(self.value(*a))
                        .and(self.value(*b))
                        .for_each(|x, y, &va, &vb| {
                            if va <= vb {
                                *y = 0.0;
                            } else {
                                *x = 0.0;
                            }
                        });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gx, &x| {
                        if x < *lo || x > *hi {
                            *gx = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(())
    }
}
