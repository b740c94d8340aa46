//! Reverse-mode autodiff over `ndarray` matrices.
//!
//! A `Tape` records a DAG of matrix ops as values are computed; a
//! backward pass then accumulates gradients for every trainable leaf.
//! Everything is a 2-D matrix: scalars are 1x1, row vectors 1xd,
//! per-token embeddings nxd. The op set is exactly what the encoder/
//! decoder/critic/classifier graphs need, nothing more.
//!
//! The tape is generic over the element type: training runs in `f32`,
//! gradient verification reruns the same graph code in `f64` against
//! central finite differences.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Element types the tape can differentiate through.
pub trait Scalar: ndarray::NdFloat + std::iter::Sum + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row source for `assemble_rows`: keep a row of the base matrix or
/// substitute a row of the cross matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSrc {
    Own(usize),
    Cross(usize),
}

enum Op<F: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize },
    /// a^T . b
    MatMulTN { a: usize, b: usize },
    /// a . b^T
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// Broadcast-add a 1xd row to every row of a.
    AddRow { a: usize, row: usize },
    /// Broadcast-add an nx1 column to every column of a.
    AddCol { a: usize, col: usize },
    Scale { a: usize, c: F },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, inv_std: Array2<F>, xhat: Array2<F> },
    MeanRows { a: usize },
    MeanAll { a: usize },
    SumAll { a: usize },
    NormalizeRows { a: usize, inv_norm: Array2<F> },
    GatherRows { a: usize, idx: Box<[usize]> },
    AssembleRows { a: usize, b: usize, plan: Box<[RowSrc]> },
    ConcatCols { a: usize, b: usize },
    ConcatRows { parts: Box<[usize]> },
    SliceCols { a: usize, start: usize, len: usize },
    DiagToCol { a: usize },
    SelectPerRow { a: usize, cols: Box<[usize]> },
    Transpose { a: usize },
}

struct Node<F: Scalar> {
    value: Arc<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients keyed by `Var`, populated for leaves that need them.
pub struct Grads<F: Scalar> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Recorded computation graph.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Array2<F>>, delta: Array2<F>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> F {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a {:?} node", m.dim());
        m[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; backward() reports its gradient. The value is
    /// shared, not copied, so parameter stores can hand the same
    /// storage to many tapes.
    pub fn param(&mut self, value: Arc<Array2<F>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a: a.0, b: b.0 }, needs)
    }

    /// a^T . b without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "matmul_tn {:?} x {:?}", va.dim(), vb.dim());
        let out = va.t().dot(vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulTN { a: a.0, b: b.0 }, needs)
    }

    /// a . b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(&vb.t());
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNT { a: a.0, b: b.0 }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1);
        assert_eq!(va.ncols(), vr.ncols());
        let out = va + &vr.broadcast(va.raw_dim()).unwrap();
        let needs = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow { a: a.0, row: row.0 }, needs)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.ncols(), 1);
        assert_eq!(va.nrows(), vc.nrows());
        let mut out = va.to_owned();
        for (mut r, c) in out.rows_mut().into_iter().zip(vc.column(0).iter()) {
            r.mapv_inplace(|x| x + *c);
        }
        let needs = self.needs(a) || self.needs(col);
        self.push(out, Op::AddCol { a: a.0, col: col.0 }, needs)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(out, Op::Scale { a: a.0, c }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu_value);
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a: a.0 }, needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_value(self.value(a));
        let needs = self.needs(a);
        self.push(out, Op::SoftmaxRows { a: a.0 }, needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.to_owned();
        for mut r in out.rows_mut() {
            let max = r.iter().cloned().fold(F::neg_infinity(), F::max);
            let logz = r.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            r.mapv_inplace(|x| x - logz);
        }
        let needs = self.needs(a);
        self.push(out, Op::LogSoftmaxRows { a: a.0 }, needs)
    }

    /// Per-row layer norm with learned 1xd scale and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::from_f64(1e-5);
        let va = self.value(a);
        let (n, d) = va.dim();
        assert_eq!(self.value(gamma).dim(), (1, d));
        assert_eq!(self.value(beta).dim(), (1, d));
        let dn = F::from_f64(d as f64);
        let mut xhat = va.to_owned();
        let mut inv_std = Array2::zeros((n, 1));
        for (mut r, mut is) in xhat.rows_mut().into_iter().zip(inv_std.rows_mut()) {
            let mean = r.iter().cloned().sum::<F>() / dn;
            let var = r.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / dn;
            let inv = (var + eps).sqrt().recip();
            r.mapv_inplace(|x| (x - mean) * inv);
            is[0] = inv;
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut out = xhat.clone();
        for mut r in out.rows_mut() {
            r.zip_mut_with(&g, |x, &gg| *x = *x * gg);
            r += &b;
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, inv_std, xhat },
            needs,
        )
    }

    /// nxd -> 1xd column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = F::from_f64(va.nrows() as f64);
        let out = va.sum_axis(Axis(0)).insert_axis(Axis(0)).mapv(|x| x / n);
        let needs = self.needs(a);
        self.push(out, Op::MeanRows { a: a.0 }, needs)
    }

    /// Mean over all entries -> 1x1.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = F::from_f64(va.len() as f64);
        let out = Array2::from_elem((1, 1), va.sum() / n);
        let needs = self.needs(a);
        self.push(out, Op::MeanAll { a: a.0 }, needs)
    }

    /// Sum over all entries -> 1x1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.needs(a);
        self.push(out, Op::SumAll { a: a.0 }, needs)
    }

    /// L2-normalizes each row.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let eps = F::from_f64(1e-12);
        let va = self.value(a);
        let (n, _) = va.dim();
        let mut out = va.to_owned();
        let mut inv_norm = Array2::zeros((n, 1));
        for (mut r, mut inv) in out.rows_mut().into_iter().zip(inv_norm.rows_mut()) {
            let norm = r.iter().map(|&x| x * x).sum::<F>().sqrt().max(eps);
            let i = norm.recip();
            r.mapv_inplace(|x| x * i);
            inv[0] = i;
        }
        let needs = self.needs(a);
        self.push(out, Op::NormalizeRows { a: a.0, inv_norm }, needs)
    }

    /// Selects rows in the given order (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut out = Array2::zeros((idx.len(), va.ncols()));
        for (mut r, &i) in out.rows_mut().into_iter().zip(&idx) {
            r.assign(&va.row(i));
        }
        let needs = self.needs(a);
        self.push(out, Op::GatherRows { a: a.0, idx: idx.into_boxed_slice() }, needs)
    }

    /// Rebuilds a matrix row-by-row from `a` (Own) and `b` (Cross),
    /// following the plan. Output has plan.len() rows.
    pub fn assemble_rows(&mut self, a: Var, b: Var, plan: Vec<RowSrc>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols());
        let mut out = Array2::zeros((plan.len(), va.ncols()));
        for (mut r, src) in out.rows_mut().into_iter().zip(&plan) {
            match *src {
                RowSrc::Own(i) => r.assign(&va.row(i)),
                RowSrc::Cross(i) => r.assign(&vb.row(i)),
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::AssembleRows { a: a.0, b: b.0, plan: plan.into_boxed_slice() }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows());
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols { a: a.0, b: b.0 }, needs)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap();
        let needs = parts.iter().any(|v| self.needs(*v));
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(out, Op::ConcatRows { parts: ids.into_boxed_slice() }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.ncols());
        let out = va.slice(s![.., start..start + len]).to_owned();
        let needs = self.needs(a);
        self.push(out, Op::SliceCols { a: a.0, start, len }, needs)
    }

    /// nxn -> nx1 main diagonal.
    pub fn diag_to_col(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), va.ncols());
        let out =
            Array2::from_shape_fn((va.nrows(), 1), |(i, _)| va[[i, i]]);
        let needs = self.needs(a);
        self.push(out, Op::DiagToCol { a: a.0 }, needs)
    }

    /// nxd -> dxn.
    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let needs = self.needs(a);
        self.push(out, Op::Transpose { a: a.0 }, needs)
    }

    /// Picks one entry per row -> nx1.
    pub fn select_per_row(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let va = self.value(a);
        assert_eq!(cols.len(), va.nrows());
        let out = Array2::from_shape_fn((cols.len(), 1), |(i, _)| va[[i, cols[i]]]);
        let needs = self.needs(a);
        self.push(out, Op::SelectPerRow { a: a.0, cols: cols.into_boxed_slice() }, needs)
    }

    /// Backprop from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward() needs a scalar root");
        self.backward_seeded(vec![(root, Array2::from_elem((1, 1), F::one()))])
    }

    /// Backprop from externally supplied cotangents. Seeds at distinct
    /// nodes accumulate; each seed must match its node's shape.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Array2<F>)>) -> Grads<F> {
        let mut slots: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            assert_eq!(seed.dim(), self.value(v).dim(), "seed shape mismatch");
            if self.nodes[v.0].needs_grad {
                accumulate(&mut slots[v.0], seed);
            }
        }
        for id in (0..self.nodes.len()).rev() {
            if slots[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let g = slots[id].take().unwrap();
            self.propagate(id, g, &mut slots);
        }
        Grads { slots }
    }

    fn propagate(&self, id: usize, g: Array2<F>, slots: &mut Vec<Option<Array2<F>>>) {
        let val = |i: usize| -> &Array2<F> { &self.nodes[i].value };
        let needs = |i: usize| self.nodes[i].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                if needs(*a) {
                    accumulate(&mut slots[*a], g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], val(*a).t().dot(&g));
                }
            }
            Op::MatMulTN { a, b } => {
                // c = a^T b
                if needs(*a) {
                    accumulate(&mut slots[*a], val(*b).dot(&g.t()));
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], val(*a).dot(&g));
                }
            }
            Op::MatMulNT { a, b } => {
                // c = a b^T
                if needs(*a) {
                    accumulate(&mut slots[*a], g.dot(val(*b)));
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], g.t().dot(val(*a)));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    accumulate(&mut slots[*a], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], g);
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    accumulate(&mut slots[*a], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], g.mapv(|x| -x));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    accumulate(&mut slots[*a], &g * val(*b));
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], &g * val(*a));
                }
            }
            Op::AddRow { a, row } => {
                if needs(*row) {
                    accumulate(&mut slots[*row], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*a) {
                    accumulate(&mut slots[*a], g);
                }
            }
            Op::AddCol { a, col } => {
                if needs(*col) {
                    accumulate(&mut slots[*col], g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                if needs(*a) {
                    accumulate(&mut slots[*a], g);
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    accumulate(&mut slots[*a], g.mapv(|x| x * *c));
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let mut dx = val(*a).to_owned();
                    dx.mapv_inplace(gelu_grad);
                    accumulate(&mut slots[*a], &g * &dx);
                }
            }
            Op::SoftmaxRows { a } => {
                if needs(*a) {
                    let y = val(id);
                    let mut dx = &g * y;
                    for (mut dr, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = dr.iter().cloned().sum::<F>();
                        dr.zip_mut_with(&yr, |d, &yy| *d = *d - yy * dot);
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::LogSoftmaxRows { a } => {
                if needs(*a) {
                    let y = val(id);
                    let mut dx = g.clone();
                    for (mut dr, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let gsum = dr.iter().cloned().sum::<F>();
                        dr.zip_mut_with(&yr, |d, &yy| *d = *d - yy.exp() * gsum);
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::LayerNorm { a, gamma, beta, inv_std, xhat } => {
                if needs(*beta) {
                    accumulate(&mut slots[*beta], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*gamma) {
                    let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut slots[*gamma], dg);
                }
                if needs(*a) {
                    let d = F::from_f64(xhat.ncols() as f64);
                    let gam = val(*gamma).row(0).to_owned();
                    let mut dxh = g.clone();
                    for mut r in dxh.rows_mut() {
                        r.zip_mut_with(&gam, |x, &gg| *x = *x * gg);
                    }
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (((mut out, dh), xh), inv) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxh.rows())
                        .zip(xhat.rows())
                        .zip(inv_std.column(0).iter())
                    {
                        let m1 = dh.iter().cloned().sum::<F>() / d;
                        let m2 = dh.iter().zip(xh.iter()).map(|(&u, &w)| u * w).sum::<F>() / d;
                        for ((o, &u), &w) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                            *o = (u - m1 - w * m2) * *inv;
                        }
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::MeanRows { a } => {
                if needs(*a) {
                    let n = val(*a).nrows();
                    let w = F::from_f64(1.0 / n as f64);
                    let row = g.row(0).mapv(|x| x * w);
                    let mut dx = Array2::zeros(val(*a).raw_dim());
                    for mut r in dx.rows_mut() {
                        r.assign(&row);
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::MeanAll { a } => {
                if needs(*a) {
                    let shape = val(*a).raw_dim();
                    let w = g[[0, 0]] * F::from_f64(1.0 / val(*a).len() as f64);
                    accumulate(&mut slots[*a], Array2::from_elem(shape, w));
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    let shape = val(*a).raw_dim();
                    accumulate(&mut slots[*a], Array2::from_elem(shape, g[[0, 0]]));
                }
            }
            Op::NormalizeRows { a, inv_norm } => {
                if needs(*a) {
                    let y = val(id);
                    let mut dx = g.clone();
                    for ((mut dr, yr), inv) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows())
                        .zip(inv_norm.column(0).iter())
                    {
                        let dot = dr.iter().zip(yr.iter()).map(|(&u, &w)| u * w).sum::<F>();
                        for (d, &w) in dr.iter_mut().zip(yr.iter()) {
                            *d = (*d - w * dot) * *inv;
                        }
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::GatherRows { a, idx } => {
                if needs(*a) {
                    let mut dx = Array2::zeros(val(*a).raw_dim());
                    for (gr, &i) in g.rows().into_iter().zip(idx.iter()) {
                        let mut row = dx.row_mut(i);
                        row += &gr;
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::AssembleRows { a, b, plan } => {
                if needs(*a) {
                    let mut dx = Array2::zeros(val(*a).raw_dim());
                    for (gr, src) in g.rows().into_iter().zip(plan.iter()) {
                        if let RowSrc::Own(i) = *src {
                            let mut row = dx.row_mut(i);
                            row += &gr;
                        }
                    }
                    accumulate(&mut slots[*a], dx);
                }
                if needs(*b) {
                    let mut dx = Array2::zeros(val(*b).raw_dim());
                    for (gr, src) in g.rows().into_iter().zip(plan.iter()) {
                        if let RowSrc::Cross(i) = *src {
                            let mut row = dx.row_mut(i);
                            row += &gr;
                        }
                    }
                    accumulate(&mut slots[*b], dx);
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = val(*a).ncols();
                if needs(*a) {
                    accumulate(&mut slots[*a], g.slice(s![.., ..ca]).to_owned());
                }
                if needs(*b) {
                    accumulate(&mut slots[*b], g.slice(s![.., ca..]).to_owned());
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts.iter() {
                    let rows = val(p).nrows();
                    if needs(p) {
                        accumulate(&mut slots[p], g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::SliceCols { a, start, len } => {
                if needs(*a) {
                    let mut dx = Array2::zeros(val(*a).raw_dim());
                    dx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::DiagToCol { a } => {
                if needs(*a) {
                    let mut dx = Array2::zeros(val(*a).raw_dim());
                    for i in 0..g.nrows() {
                        dx[[i, i]] = g[[i, 0]];
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::SelectPerRow { a, cols } => {
                if needs(*a) {
                    let mut dx = Array2::zeros(val(*a).raw_dim());
                    for (i, &c) in cols.iter().enumerate() {
                        dx[[i, c]] = g[[i, 0]];
                    }
                    accumulate(&mut slots[*a], dx);
                }
            }
            Op::Transpose { a } => {
                if needs(*a) {
                    accumulate(&mut slots[*a], g.t().to_owned());
                }
            }
        }
    }
}

fn gelu_value<F: Scalar>(x: F) -> F {
    // tanh approximation; smooth everywhere, which keeps finite
    // differences well behaved.
    let k = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::from_f64(0.797_884_560_802_865_4);
    let c = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * c * x * x)
}

/// Row-wise stable softmax of a plain matrix.
pub fn softmax_rows_value<F: Scalar>(m: &Array2<F>) -> Array2<F> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let max = r.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        r.mapv_inplace(|x| {
            let e = (x - max).exp();
            z = z + e;
            e
        });
        r.mapv_inplace(|x| x / z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        use rand_distr::{Distribution, StandardNormal};
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
    }

    /// Central-difference check of d(loss)/d(leaf) for every leaf entry.
    fn fd_check(
        shapes: &[(usize, usize)],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array2<f64>> = shapes.iter().map(|&(n, d)| randn(&mut rng, n, d)).collect();
        let eval = |vals: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> =
                vals.iter().map(|v| tape.param(Arc::new(v.clone()))).collect();
            let root = build(&mut tape, &vars);
            tape.scalar(root)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> =
            inputs.iter().map(|v| tape.param(Arc::new(v.clone()))).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let h = 1e-5;
        for (pi, shape) in shapes.iter().enumerate() {
            let g = grads.get(vars[pi]).expect("leaf gradient missing");
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = inputs.clone();
                    plus[pi][[i, j]] += h;
                    let mut minus = inputs.clone();
                    minus[pi][[i, j]] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = g[[i, j]];
                    // relative check with an absolute floor for the
                    // finite-difference noise on near-zero gradients
                    assert!(
                        (an - fd).abs() < 1e-6 * an.abs().max(fd.abs()) + 1e-9,
                        "param {pi} entry ({i},{j}): analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        fd_check(&[(3, 4), (4, 5), (3, 5)], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.mul(p, v[2]);
            t.mean_all(q)
        }, 11);
    }

    #[test]
    fn grad_transpose_attention_pooling() {
        // Learned weighted mean over rows: softmax over a score column,
        // transposed into a row so the row softmax applies.
        fd_check(&[(5, 3), (3, 1)], |t, v| {
            let scores = t.matmul(v[0], v[1]); // 5x1
            let row = t.transpose(scores); // 1x5
            let w = t.softmax_rows(row);
            let pooled = t.matmul(w, v[0]); // 1x3
            t.mean_all(pooled)
        }, 29);
    }

    #[test]
    fn grad_matmul_transposed_variants() {
        fd_check(&[(4, 3), (4, 5)], |t, v| {
            let p = t.matmul_tn(v[0], v[1]); // 3x5
            t.sum_all(p)
        }, 12);
        fd_check(&[(3, 4), (5, 4)], |t, v| {
            let p = t.matmul_nt(v[0], v[1]); // 3x5
            let sq = t.mul(p, p);
            t.mean_all(sq)
        }, 13);
    }

    #[test]
    fn grad_broadcast_adds() {
        fd_check(&[(4, 3), (1, 3), (4, 1)], |t, v| {
            let p = t.add_row(v[0], v[1]);
            let q = t.add_col(p, v[2]);
            let r = t.gelu(q);
            t.mean_all(r)
        }, 14);
    }

    #[test]
    fn grad_softmax_and_log_softmax() {
        fd_check(&[(3, 5), (3, 5)], |t, v| {
            let s = t.softmax_rows(v[0]);
            let l = t.log_softmax_rows(v[1]);
            let p = t.mul(s, l);
            t.sum_all(p)
        }, 15);
    }

    #[test]
    fn grad_layer_norm() {
        fd_check(&[(4, 6), (1, 6), (1, 6)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 16);
    }

    #[test]
    fn grad_normalize_and_means() {
        fd_check(&[(5, 4)], |t, v| {
            let y = t.normalize_rows(v[0]);
            let m = t.mean_rows(y);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        }, 17);
    }

    #[test]
    fn grad_gather_assemble_concat_slice() {
        fd_check(&[(4, 3), (4, 3)], |t, v| {
            let g = t.gather_rows(v[0], vec![0, 2, 2, 3]);
            let a = t.assemble_rows(
                g,
                v[1],
                vec![RowSrc::Own(0), RowSrc::Cross(1), RowSrc::Own(3), RowSrc::Cross(2)],
            );
            let c = t.concat_cols(a, v[1]);
            let sl = t.slice_cols(c, 1, 4);
            let sq = t.mul(sl, sl);
            t.mean_all(sq)
        }, 18);
    }

    #[test]
    fn grad_diag_select_scale() {
        fd_check(&[(4, 4)], |t, v| {
            let d = t.diag_to_col(v[0]);
            let s = t.select_per_row(v[0], vec![1, 0, 3, 2]);
            let p = t.mul(d, s);
            let sc = t.scale(p, 0.7);
            t.sum_all(sc)
        }, 19);
    }

    #[test]
    fn grad_concat_rows() {
        fd_check(&[(2, 3), (3, 3), (1, 3)], |t, v| {
            let c = t.concat_rows(vec![v[0], v[1], v[2]]);
            let n = t.normalize_rows(c);
            let sq = t.mul(n, n);
            t.mean_all(sq)
        }, 20);
    }

    #[test]
    fn grad_sub_attention_like() {
        // One full attention head: softmax(q k^T / sqrt(d)) v.
        fd_check(&[(4, 3), (4, 3), (4, 3)], |t, v| {
            let scores = t.matmul_nt(v[0], v[1]);
            let scaled = t.scale(scores, 1.0 / 3f64.sqrt());
            let attn = t.softmax_rows(scaled);
            let out = t.matmul(attn, v[2]);
            let diff = t.sub(out, v[2]);
            let sq = t.mul(diff, diff);
            t.mean_all(sq)
        }, 21);
    }

    #[test]
    fn constants_are_not_differentiated() {
        let mut tape: Tape<f64> = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.param(Arc::new(array![[3.0, 4.0]]));
        let s = tape.mul(c, p);
        let root = tape.sum_all(s);
        let grads = tape.backward(root);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn seeded_backward_accumulates() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(Arc::new(array![[1.0], [2.0]]));
        let a = tape.scale(p, 2.0);
        let b = tape.scale(p, 3.0);
        let grads = tape.backward_seeded(vec![
            (a, array![[1.0], [1.0]]),
            (b, array![[1.0], [0.0]]),
        ]);
        assert_eq!(grads.get(p).unwrap(), &array![[5.0], [2.0]]);
    }

    #[test]
    fn gather_duplicate_rows_accumulate() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(Arc::new(array![[1.0, 1.0], [2.0, 2.0]]));
        let g = tape.gather_rows(p, vec![1, 1, 0]);
        let root = tape.sum_all(g);
        let grads = tape.backward(root);
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn values_are_shared_not_copied() {
        let storage = Arc::new(array![[1.0f32, 2.0]]);
        let mut tape: Tape<f32> = Tape::new();
        let v = tape.param(storage.clone());
        assert!(std::ptr::eq(tape.value(v) as *const _, storage.as_ref() as *const _));
    }
}
