//! Minimal reverse-mode autodiff over dense matrices.
//!
//! Every node holds a `DMatrix<f64>`; scalars are 1x1. Nodes are appended in
//! evaluation order, so a single reverse sweep visits them topologically.
//! Nodes that do not depend on a parameter leaf are never differentiated.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gates::normal_pdf;
use crate::graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Clamp(Var, f64, f64),
    NormalCdf(Var),
    ScaleColumns(Var, Var),
    PairwiseSqDist(Var),
    KthNeighbor { d2: Var, neighbor: Vec<usize>, floored: Vec<bool> },
    ZeroDiag(Var),
    RowNormalize(Var),
    CenterColumns(Var),
    NormalizeColumns { a: Var, norms: Vec<f64> },
    Dot(Var, Var),
    SumSquares(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Clamp(..) => "clamp",
            Op::NormalCdf(..) => "normal_cdf",
            Op::ScaleColumns(..) => "scale_columns",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::KthNeighbor { .. } => "kth_neighbor",
            Op::ZeroDiag(..) => "zero_diag",
            Op::RowNormalize(..) => "row_normalize",
            Op::CenterColumns(..) => "center_columns",
            Op::NormalizeColumns { .. } => "normalize_columns",
            Op::Dot(..) => "dot",
            Op::SumSquares(..) => "sum_squares",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, zeros if it did not influence the output.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DMatrix::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// A differentiable input.
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.v(a).shape(), self.v(b).shape());
        if sa != sb {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: format!("{}x{}", sa.0, sa.1),
                got: format!("{}x{}", sb.0, sb.1),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.v(a), self.v(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::DimensionMismatch {
                context: "tape matmul",
                expected: format!("{} rows on the right", va.ncols()),
                got: format!("{}", vb.nrows()),
            });
        }
        let out = va * vb;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.v(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("tape add", a, b)?;
        let out = self.v(a) + self.v(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("tape sub", a, b)?;
        let out = self.v(a) - self.v(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("tape mul", a, b)?;
        let out = self.v(a).component_mul(self.v(b));
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("tape div", a, b)?;
        let out = self.v(a).component_div(self.v(b));
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.v(a) * s;
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.v(a).add_scalar(s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.v(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.v(a).clone();
        crate::grouping::softmax_rows_in_place(&mut out);
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Elementwise clamp; the derivative is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.v(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn normal_cdf(&mut self, a: Var) -> Var {
        let out = self.v(a).map(crate::gates::normal_cdf);
        self.push(out, Op::NormalCdf(a), &[a])
    }

    /// `x[:, i] * w[i]` for an `n x d` matrix and a length-`d` column vector.
    pub fn scale_columns(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.v(x), self.v(w));
        if vw.shape() != (vx.ncols(), 1) {
            return Err(Error::DimensionMismatch {
                context: "tape scale_columns",
                expected: format!("{}x1 weights", vx.ncols()),
                got: format!("{}x{}", vw.nrows(), vw.ncols()),
            });
        }
        let mut out = vx.clone();
        for (mut col, s) in out.column_iter_mut().zip(vw.iter()) {
            col *= *s;
        }
        Ok(self.push(out, Op::ScaleColumns(x, w), &[x, w]))
    }

    /// Squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Var {
        let out = graph::pairwise_sq_dists(self.v(x));
        self.push(out, Op::PairwiseSqDist(x), &[x])
    }

    /// Self-tuning bandwidths as an `n x 1` column. Floored entries are
    /// treated as constants.
    pub fn kth_neighbor(&mut self, d2: Var, k: usize) -> Result<Var> {
        let bw = graph::kth_neighbor_bandwidths(self.v(d2), k)?;
        let n = bw.gamma.len();
        let out = DMatrix::from_vec(n, 1, bw.gamma);
        Ok(self.push(out, Op::KthNeighbor { d2, neighbor: bw.neighbor, floored: bw.floored }, &[d2]))
    }

    pub fn zero_diag(&mut self, a: Var) -> Var {
        let mut out = self.v(a).clone();
        out.fill_diagonal(0.0);
        self.push(out, Op::ZeroDiag(a), &[a])
    }

    /// Divides each row by its sum, floored at `graph::DEGREE_FLOOR`.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.v(a).clone();
        for mut row in out.row_iter_mut() {
            let s = row.sum().max(graph::DEGREE_FLOOR);
            row /= s;
        }
        self.push(out, Op::RowNormalize(a), &[a])
    }

    pub fn center_columns(&mut self, a: Var) -> Var {
        let mut out = self.v(a).clone();
        for mut col in out.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        self.push(out, Op::CenterColumns(a), &[a])
    }

    /// Unit-norm columns; zero columns stay zero and pass no gradient.
    pub fn normalize_columns(&mut self, a: Var) -> Var {
        let mut out = self.v(a).clone();
        let mut norms = Vec::with_capacity(out.ncols());
        for mut col in out.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            } else {
                col.fill(0.0);
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeColumns { a, norms }, &[a])
    }

    /// Frobenius inner product as a 1x1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("tape dot", a, b)?;
        let out = DMatrix::from_element(1, 1, self.v(a).dot(self.v(b)));
        Ok(self.push(out, Op::Dot(a, b), &[a, b]))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = DMatrix::from_element(1, 1, self.v(a).norm_squared());
        self.push(out, Op::SumSquares(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = DMatrix::from_element(1, 1, self.v(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a 1x1 output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.v(out).shape() != (1, 1) {
            return Err(Error::DimensionMismatch {
                context: "tape backward",
                expected: "1x1 output".into(),
                got: format!("{}x{}", self.v(out).nrows(), self.v(out).ncols()),
            });
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at node {idx} ({})",
                    node.op.name()
                )));
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<DMatrix<f64>>], v: Var, delta: DMatrix<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &DMatrix<f64>, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g * self.v(b).transpose());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.v(a).transpose() * g);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.component_mul(self.v(b)));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.component_mul(self.v(a)));
                }
            }
            Op::Div(a, b) => {
                let gb = g.component_div(self.v(b));
                if self.needs(b) {
                    self.accumulate(grads, b, -gb.component_mul(out));
                }
                self.accumulate(grads, a, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g * s),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, a, g.component_mul(out)),
            Op::SoftmaxRows(a) => {
                let mut da = g.component_mul(out);
                for (mut row, s) in da.row_iter_mut().zip(out.row_iter()) {
                    let inner = row.sum();
                    row -= s * inner;
                }
                self.accumulate(grads, a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.v(a);
                let da = g.zip_map(x, |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 });
                self.accumulate(grads, a, da);
            }
            Op::NormalCdf(a) => {
                let da = g.zip_map(self.v(a), |gi, xi| gi * normal_pdf(xi));
                self.accumulate(grads, a, da);
            }
            Op::ScaleColumns(x, w) => {
                let vx = self.v(x);
                let vw = self.v(w);
                if self.needs(w) {
                    let dw = DMatrix::from_iterator(
                        vw.nrows(),
                        1,
                        g.column_iter().zip(vx.column_iter()).map(|(gc, xc)| gc.dot(&xc)),
                    );
                    self.accumulate(grads, w, dw);
                }
                if self.needs(x) {
                    let mut dx = g.clone();
                    for (mut col, s) in dx.column_iter_mut().zip(vw.iter()) {
                        col *= *s;
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            Op::PairwiseSqDist(x) => {
                // dX = 2 (diag(S 1) X - S X) with S = G + G^T
                let s = g + g.transpose();
                let vx = self.v(x);
                let mut dx = &s * vx;
                for (i, mut row) in dx.row_iter_mut().enumerate() {
                    let r = s.row(i).sum();
                    row.neg_mut();
                    row += vx.row(i) * r;
                }
                self.accumulate(grads, x, dx * 2.0);
            }
            Op::KthNeighbor { d2, ref neighbor, ref floored } => {
                let n = neighbor.len();
                let mut dd = DMatrix::zeros(n, n);
                for i in 0..n {
                    if !floored[i] {
                        dd[(i, neighbor[i])] += g[(i, 0)] / (2.0 * out[(i, 0)]);
                    }
                }
                self.accumulate(grads, d2, dd);
            }
            Op::ZeroDiag(a) => {
                let mut da = g.clone();
                da.fill_diagonal(0.0);
                self.accumulate(grads, a, da);
            }
            Op::RowNormalize(a) => {
                let va = self.v(a);
                let mut da = g.clone();
                for (i, mut row) in da.row_iter_mut().enumerate() {
                    let raw = va.row(i).sum();
                    if raw > graph::DEGREE_FLOOR {
                        let inner = g.row(i).dot(&out.row(i));
                        row.add_scalar_mut(-inner);
                        row /= raw;
                    } else {
                        row /= graph::DEGREE_FLOOR;
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::CenterColumns(a) => {
                let mut da = g.clone();
                for mut col in da.column_iter_mut() {
                    let m = col.mean();
                    col.add_scalar_mut(-m);
                }
                self.accumulate(grads, a, da);
            }
            Op::NormalizeColumns { a, ref norms } => {
                let mut da = g.clone();
                for (j, mut col) in da.column_iter_mut().enumerate() {
                    if norms[j] > 0.0 {
                        let inner = g.column(j).dot(&out.column(j));
                        col -= out.column(j) * inner;
                        col /= norms[j];
                    } else {
                        col.fill(0.0);
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::Dot(a, b) => {
                let s = g[(0, 0)];
                if self.needs(a) {
                    self.accumulate(grads, a, self.v(b) * s);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.v(a) * s);
                }
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g[(0, 0)];
                self.accumulate(grads, a, self.v(a) * s);
            }
            Op::Sum(a) => {
                let (r, c) = self.v(a).shape();
                self.accumulate(grads, a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` against the tape gradient for one input.
    fn check<F>(x0: DMatrix<f64>, f: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let out = f(&mut tape, x);
        let analytic = tape.backward(out).unwrap().wrt(x);
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[i] += delta;
                let mut t = Tape::new();
                let v = t.param(xp);
                let o = f(&mut t, v);
                t.scalar(o)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1.0);
            assert!(err < tol, "entry {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random(&mut rng, 3, 4);
        check(random(&mut rng, 3, 4), |t, x| {
            let e = t.exp(x);
            let c = t.constant(w.clone());
            let p = t.mul(e, c).unwrap();
            let q = t.div(p, e).unwrap();
            let r = t.div(c, e).unwrap();
            let s = t.add(q, r).unwrap();
            let s = t.sub(s, x).unwrap();
            let s = t.scale(s, 1.7);
            let s = t.add_scalar(s, 0.3);
            t.sum_squares(s)
        }, 1e-7);
    }

    #[test]
    fn matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 4, 2);
        check(random(&mut rng, 3, 4), |t, x| {
            let cb = t.constant(b.clone());
            let m = t.matmul(x, cb).unwrap();
            let xt = t.transpose(x);
            let g = t.matmul(xt, x).unwrap();
            let sm = t.softmax_rows(m);
            let d = t.dot(m, sm).unwrap();
            let s = t.sum(g);
            t.add(d, s).unwrap()
        }, 1e-7);
    }

    #[test]
    fn normalization_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 5, 3);
        check(random(&mut rng, 5, 3), |t, x| {
            let c = t.center_columns(x);
            let n = t.normalize_columns(c);
            let cw = t.constant(w.clone());
            let e = t.exp(x);
            let r = t.row_normalize(e);
            let a = t.dot(n, cw).unwrap();
            let b = t.dot(r, cw).unwrap();
            t.add(a, b).unwrap()
        }, 1e-7);
    }

    #[test]
    fn gate_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random(&mut rng, 6, 4);
        // keep clamp inputs away from the kinks
        let x0 = DMatrix::from_column_slice(4, 1, &[-0.4, 0.2, 0.7, 1.3]);
        check(x0, |t, v| {
            let z = t.clamp(v, 0.0, 1.0);
            let p = t.normal_cdf(v);
            let s = t.add(z, p).unwrap();
            let cx = t.constant(data.clone());
            let xs = t.scale_columns(cx, s).unwrap();
            t.sum_squares(xs)
        }, 1e-7);
    }

    #[test]
    fn graph_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(random(&mut rng, 9, 3), |t, x| {
            let d2 = t.pairwise_sq_dist(x);
            let g = t.kth_neighbor(d2, 3).unwrap();
            let gt = t.transpose(g);
            let outer = t.matmul(g, gt).unwrap();
            let ratio = t.div(d2, outer).unwrap();
            let neg = t.scale(ratio, -1.0);
            let w = t.exp(neg);
            let w = t.zero_diag(w);
            let p = t.row_normalize(w);
            let px = t.matmul(p, x).unwrap();
            t.dot(x, px).unwrap()
        }, 1e-6);
    }

    #[test]
    fn constants_get_no_gradient_and_shapes_are_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(DMatrix::identity(2, 2));
        let b = tape.param(DMatrix::from_element(2, 2, 3.0));
        let s = tape.dot(a, b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a), DMatrix::zeros(2, 2));
        assert_eq!(g.wrt(b), DMatrix::identity(2, 2));
        let c = tape.param(DMatrix::zeros(3, 1));
        assert!(tape.add(a, c).is_err());
        assert!(tape.matmul(c, a).is_err());
        assert!(tape.backward(b).is_err());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut tape = Tape::new();
        let x = tape.param(DMatrix::from_element(1, 1, 800.0));
        let e = tape.exp(x);
        let s = tape.sum_squares(e);
        match tape.backward(s) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("node")),
            other => panic!("expected a numerical error, got {other:?}"),
        }
    }
}
