//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from the [`ParamStore`] instead of copying them, so a
//! tape is cheap to build per sample. [`Tape::backward`] walks the records in
//! reverse and returns the gradient of a scalar output with respect to every
//! node, from which per-parameter gradients are gathered.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    /// Stores per-row `1/sigma` in the node's aux slot.
    LayerNorm(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RowNorms(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Array2<f64>>,
    aux: Option<Array2<f64>>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(val)) => val.view(),
            (Op::Param(id), None) => self.params.value(*id).view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value: Some(value), aux: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant (non-trainable) input.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, aux: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = self.value(a).dot(&self.value(b));
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = &self.value(a) + &self.value(b);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = &self.value(a) - &self.value(b);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = &self.value(a) * &self.value(b);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).mapv(|v| v * s);
        self.push(Op::Scale(a, s), out)
    }

    fn check_row(&self, op: &str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err(op, sa, sr));
        }
        Ok(())
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let out = &self.value(a) + &self.value(row);
        Ok(self.push(Op::AddRow(a, row), out))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let out = &self.value(a) * &self.value(row);
        Ok(self.push(Op::MulRow(a, row), out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut out = Array2::zeros((rows, cols));
        let mut inv = Array2::zeros((rows, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv[[i, 0]] = r;
            for j in 0..cols {
                out[[i, j]] = (row[j] - mean) * r;
            }
        }
        let v = self.push(Op::LayerNorm(a), out);
        self.nodes[v.0].aux = Some(inv);
        v
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(shape_err("slice_rows", (r, c), (start, len)));
        }
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", (r, c), (start, len)));
        }
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    /// Euclidean norm of each row, as a column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt());
        self.push(Op::RowNorms(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Shape(format!("backward needs a scalar output, got {:?}", self.shape(output))));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
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
                    let ga = &g * &self.value(*b);
                    let gb = &g * &self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.mapv(|v| v * s)),
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let gr = (&g * &x).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * &self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("tanh value");
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= 1.0 - yv * yv);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(&x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|gv, &yv| *gv -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a) => {
                    let y = node.value.as_ref().expect("layer norm value");
                    let inv = node.aux.as_ref().expect("layer norm aux");
                    let cols = y.ncols() as f64;
                    let mut ga = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.sum() / cols;
                        let mean_gy = gr.dot(&yr) / cols;
                        let r = inv[[i, 0]];
                        for j in 0..y.ncols() {
                            ga[[i, j]] = r * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let len = g.nrows();
                    ga.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let len = g.ncols();
                    ga.slice_mut(s![.., *start..*start + len]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::RowNorms(a) => {
                    let x = self.value(*a);
                    let n = node.value.as_ref().expect("norm value");
                    let mut ga = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let ni = n[[i, 0]];
                        if ni > 0.0 {
                            let c = g[[i, 0]] / ni;
                            for j in 0..x.ncols() {
                                ga[[i, j]] = c * x[[i, j]];
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Per-parameter gradients indexed by [`ParamId`]; `None` where the
    /// parameter did not take part in the output.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Array2<f64>>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).map(|g| g.as_standard_layout().into_owned())))
            .collect()
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<ArrayView2<'_, f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| g.view())
    }
}

/// Adds `src` into `dst` slot-wise, allocating where `dst` is empty.
pub fn accumulate(dst: &mut [Option<Array2<f64>>], src: Vec<Option<Array2<f64>>>) {
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(d) => *d += &s,
                None => *d = Some(s),
            }
        }
    }
}
