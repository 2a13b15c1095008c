//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. After
//! building a scalar (1×1) loss, [`Graph::backward`] propagates adjoints back
//! through the tape and [`Graph::grad`] returns the gradient of any recorded
//! node. Only nodes that depend on a leaf created with
//! [`Graph::param`] carry adjoints; everything else is treated as a constant.
//!
//! The operation set is the small vocabulary needed by the segmenter and its
//! losses: matrix products, row softmax, fixed sparse linear maps (used for
//! image resizing), reductions, gathers and row-wise cosine helpers.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed sparse linear map from vectors of length `src_len` to vectors of
/// length `dst_len`. Applied independently to every row of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLinear {
    pub src_len: usize,
    pub dst_len: usize,
    /// For each destination index, the `(source index, weight)` taps.
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl SparseLinear {
    pub fn apply_row(&self, src: &[f64], dst: &mut [f64]) {
        for (d, taps) in dst.iter_mut().zip(&self.taps) {
            *d = taps.iter().map(|&(s, w)| w * src[s]).sum();
        }
    }

    fn apply_transpose_row(&self, dst_grad: &[f64], src_grad: &mut [f64]) {
        for (g, taps) in dst_grad.iter().zip(&self.taps) {
            for &(s, w) in taps {
                src_grad[s] += w * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    LinearRows(Var, Arc<SparseLinear>),
    Sum(Var),
    Mean(Var),
    Pick(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    RowNormalize(Var),
    RowDot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Recording tape. Nodes are append-only, so a [`Var`] stays valid for the
/// lifetime of the graph that created it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Mat>>>,
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.grads = None;
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::contract(format!(
                "matmul: inner dims {:?} x {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let out = va.dot(vb);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let t = self.tracked(&[a]);
        self.push(out, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), t))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let t = self.tracked(&[a]);
        self.push(out, Op::Scale(a, c), t)
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).dim() != (1, 1) {
            return Err(Error::contract("scale_by: scale must be 1x1"));
        }
        let out = self.value(a) * self.scalar(s);
        let t = self.tracked(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), t))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let t = self.tracked(&[a]);
        self.push(out, Op::AddScalar(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let t = self.tracked(&[a]);
        self.push(out, Op::Square(a), t)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        let t = self.tracked(&[a]);
        self.push(out, Op::Sqrt(a), t)
    }

    /// `ln(max(x, floor))`; clamped entries pass no gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor).ln());
        let t = self.tracked(&[a]);
        self.push(out, Op::LogClamped(a, floor), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::SoftmaxRows(a), t)
    }

    /// Applies a fixed sparse linear map to every row of `a`.
    pub fn linear_rows(&mut self, a: Var, map: Arc<SparseLinear>) -> Result<Var> {
        let va = self.value(a);
        if va.ncols() != map.src_len {
            return Err(Error::contract(format!(
                "linear_rows: row length {} but map expects {}",
                va.ncols(),
                map.src_len
            )));
        }
        let mut out = Array2::zeros((va.nrows(), map.dst_len));
        for (src, mut dst) in va.rows().into_iter().zip(out.rows_mut()) {
            let src = src.to_vec();
            map.apply_row(&src, dst.as_slice_mut().expect("standard layout"));
        }
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::LinearRows(a, map), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(out, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let t = self.tracked(&[a]);
        self.push(out, Op::Mean(a), t)
    }

    /// Picks `a[i, cols[i]]` for every row, giving an `[n, 1]` column.
    pub fn pick(&mut self, a: Var, cols: Arc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        if cols.len() != va.nrows() || cols.iter().any(|&c| c >= va.ncols()) {
            return Err(Error::contract("pick: index list does not match rows/cols"));
        }
        let out = Array2::from_shape_fn((va.nrows(), 1), |(i, _)| va[[i, cols[i]]]);
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::Pick(a, cols), t))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        if rows.iter().any(|&r| r >= va.nrows()) {
            return Err(Error::contract("gather_rows: row index out of range"));
        }
        let out = va.select(Axis(0), &rows);
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::GatherRows(a, rows), t))
    }

    /// Scales every row to unit Euclidean norm. All-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::RowNormalize(a), t)
    }

    /// Row-wise inner products, giving an `[n, 1]` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Array2::from_shape_fn((va.nrows(), 1), |(i, _)| va.row(i).dot(&vb.row(i)));
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), t))
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::contract("add_all: empty list"))?;
        let mut acc = *first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Runs reverse accumulation from the 1×1 node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::contract("backward: loss must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`. Nodes that
    /// the loss does not depend on get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Result<Mat> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::contract("gradient queried before a backward pass"))?;
        Ok(grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Array2::zeros(self.value(v).dim())))
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                self.accumulate(grads, *a, g * sv);
                let gs = (g * self.value(*a)).sum();
                self.accumulate(grads, *s, Array2::from_elem((1, 1), gs));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => self.accumulate(grads, *a, g * &(self.value(*a) * 2.0)),
            Op::Sqrt(a) => {
                let d = Zip::from(g).and(y).map_collect(|&gv, &yv| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::LogClamped(a, floor) => {
                let mut d = self.value(*a).mapv(|x| if x > *floor { 1.0 / x } else { 0.0 });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * s);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LinearRows(a, map) => {
                let va = self.value(*a);
                let mut d = Array2::zeros(va.dim());
                for (grow, mut drow) in g.rows().into_iter().zip(d.rows_mut()) {
                    let grow = grow.to_vec();
                    map.apply_transpose_row(&grow, drow.as_slice_mut().expect("standard layout"));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let d = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                self.accumulate(grads, *a, d);
            }
            Op::Pick(a, cols) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (i, &c) in cols.iter().enumerate() {
                    d[[i, c]] = g[[i, 0]];
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut drow = d.row_mut(r);
                    drow += &g.row(k);
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowNormalize(a) => {
                let va = self.value(*a);
                let mut d = Array2::zeros(va.dim());
                for i in 0..va.nrows() {
                    let n = va.row(i).dot(&va.row(i)).sqrt();
                    if n > 0.0 {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let proj = gr.dot(&yr);
                        let mut drow = d.row_mut(i);
                        Zip::from(&mut drow)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|dv, &gv, &yv| *dv = (gv - yv * proj) / n);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowDot(a, b) => {
                let col = g.column(0).insert_axis(Axis(1));
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, self.value(*b) * &col);
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a) * &col);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-5;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            out[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{a:?} vs {b:?}");
        }
    }

    fn check(x0: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap();
        let numeric = numeric_grad(&x0, |xv| {
            let mut g = Graph::new();
            let x = g.param(xv.clone());
            let l = build(&mut g, x);
            g.scalar(l)
        });
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn matmul_softmax_chain() {
        let w = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]];
        check(array![[0.2, -1.0], [0.7, 0.3]], move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let s = g.softmax_rows(y);
            let sq = g.square(s);
            g.sum(sq)
        });
    }

    #[test]
    fn cosine_chain() {
        let other = array![[1.0, 0.5, -0.3], [0.2, 0.1, 0.9]];
        check(array![[0.4, -0.1, 0.8], [1.5, 0.2, -0.4]], move |g, x| {
            let o = g.constant(other.clone());
            let xn = g.row_normalize(x);
            let on = g.row_normalize(o);
            let d = g.row_dot(xn, on).unwrap();
            let d2 = g.square(d);
            g.mean(d2)
        });
    }

    #[test]
    fn gather_pick_log_scale_by() {
        check(array![[0.4, 0.1, 0.8], [1.5, 0.2, 0.4]], |g, x| {
            let rows = g.gather_rows(x, Arc::from(vec![1, 0, 1])).unwrap();
            let p = g.pick(rows, Arc::from(vec![0, 2, 1])).unwrap();
            let l = g.log_clamped(p, 1e-12);
            let s = g.sum(l);
            let sx = g.mean(x);
            let t = g.scale_by(s, sx).unwrap();
            let tr = g.transpose(t);
            g.add_scalar(tr, 3.0)
        });
    }

    #[test]
    fn linear_rows_is_transpose_in_backward() {
        let map = Arc::new(SparseLinear {
            src_len: 2,
            dst_len: 3,
            taps: vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]],
        });
        check(array![[0.3, 0.9]], move |g, x| {
            let y = g.linear_rows(x, map.clone()).unwrap();
            let y2 = g.square(y);
            g.sum(y2)
        });
    }

    #[test]
    fn untouched_input_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0, 2.0]]);
        let b = g.param(array![[3.0, 4.0]]);
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), array![[0.0, 0.0]]);
        assert_eq!(g.grad(a).unwrap(), array![[1.0, 1.0]]);
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0]]);
        assert!(matches!(g.grad(a), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let mut g = Graph::new();
        let a = g.param(array![[0.0, 0.0], [3.0, 4.0]]);
        let n = g.row_normalize(a);
        assert_eq!(g.value(n), &array![[0.0, 0.0], [0.6, 0.8]]);
    }
}
