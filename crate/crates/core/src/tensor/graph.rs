use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{conv_output_len, Real, Tensor};
use crate::error::{Error, Result};

type Id = usize;

enum Op<R> {
    Leaf,
    Constant,
    Conv1d { input: Id, kernel: Id, bias: Id, geom: ConvGeom },
    MatMul { a: Id, b: Id },
    Affine { x: Id, w: Id, b: Id },
    Transpose(Id),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, R),
    AddScalar(Id),
    Tanh(Id),
    Sigmoid(Id),
    Relu(Id),
    Sum(Id),
    Mean(Id),
    LogSoftmax(Id),
    CausalSoftmax(Id),
    ChannelNorm { x: Id, gain: Id, bias: Id, xhat: Vec<R>, inv_std: Vec<R> },
    SliceRows { x: Id, start: usize },
    SliceCols { x: Id, start: usize },
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    Reshape(Id),
    GatherRows { x: Id, idx: Vec<usize> },
    CandidateScores { pred: Id, pool: Id, idx: Vec<usize> },
    PickPerRow { x: Id, cols: Vec<usize> },
    /// Scalar output whose gradient w.r.t. `input` was computed alongside the value.
    Precomputed { input: Id, grad: Vec<R> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// A computation record. Operations append nodes; [`Graph::backward`]
/// walks them in reverse.
///
/// Not `Sync`: a graph lives on one thread for its forward and backward pass.
pub struct Graph<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    adjoints: RefCell<Vec<Option<Vec<R>>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, R: Real> {
    graph: &'g Graph<R>,
    id: Id,
}

impl<R: Real> fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            adjoints: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks, frozen parameters).
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.adjoints.borrow_mut().push(None);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: Id) -> Ref<'_, Tensor<R>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulated adjoint of `v`, zeros if no backward pass has reached it.
    pub fn grad(&self, v: Var<'_, R>) -> Tensor<R> {
        let shape = self.value(v.id).shape().to_vec();
        match &self.adjoints.borrow()[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("adjoint shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Resets every stored adjoint to zero.
    pub fn zero_grad(&self) {
        for a in self.adjoints.borrow_mut().iter_mut() {
            *a = None;
        }
    }

    /// Reverse pass from a scalar root. Leaf adjoints accumulate across calls.
    pub fn backward(&self, root: Var<'_, R>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", nodes[root.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(vec![R::one()]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut adj = self.adjoints.borrow_mut();
                match &mut adj[id] {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc<'a, R: Real>(nodes: &[Node<R>], grads: &'a mut [Option<Vec<R>>], id: Id) -> Option<&'a mut Vec<R>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![R::zero(); len]))
}

fn acc_slice<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], id: Id, add: &[R]) {
    if let Some(g) = acc(nodes, grads, id) {
        g.iter_mut().zip(add).for_each(|(a, &v)| *a += v);
    }
}

fn propagate<R: Real>(nodes: &[Node<R>], id: Id, g: &[R], grads: &mut [Option<Vec<R>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Conv1d { input, kernel, bias, geom } => {
            let need_x = nodes[*input].requires_grad;
            let need_w = nodes[*kernel].requires_grad;
            let (dx, dw, db) = kernels::conv1d_backward(
                nodes[*input].value.data(),
                nodes[*kernel].value.data(),
                g,
                geom,
                need_x,
                need_w,
            );
            if need_x {
                acc_slice(nodes, grads, *input, &dx);
            }
            if need_w {
                acc_slice(nodes, grads, *kernel, &dw);
            }
            acc_slice(nodes, grads, *bias, &db);
        }
        Op::MatMul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                kernels::matmul_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::Affine { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
            if let Some(gx) = acc(nodes, grads, *x) {
                kernels::matmul_acc(g, wv.data(), gx, m, n, k);
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                kernels::matmul_tn_acc(g, xv.data(), gw, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            acc_slice(nodes, grads, *a, g);
            acc_slice(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            acc_slice(nodes, grads, *a, g);
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(a, &v)| *a -= v);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::axpy(*s, g, ga);
            }
        }
        Op::AddScalar(a) => acc_slice(nodes, grads, *a, g),
        Op::Tanh(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &y), &gv) in ga.iter_mut().zip(out.data()).zip(g) {
                    *d += gv * (R::one() - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &y), &gv) in ga.iter_mut().zip(out.data()).zip(g) {
                    *d += gv * y * (R::one() - y);
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &y), &gv) in ga.iter_mut().zip(out.data()).zip(g) {
                    if y > R::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let s = g[0] / R::from_usize(ga.len()).unwrap();
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((drow, yrow), grow) in ga.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let gsum: R = grow.iter().copied().sum();
                    for ((d, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += gv - y.exp() * gsum;
                    }
                }
            }
        }
        Op::CausalSoftmax(a) => {
            let c = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..out.rows() {
                    let p = &out.data()[i * c..i * c + i + 1];
                    let gr = &g[i * c..i * c + i + 1];
                    let inner = kernels::dot(p, gr);
                    for j in 0..=i {
                        ga[i * c + j] += p[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::ChannelNorm { x, gain, bias, xhat, inv_std } => {
            let c = out.cols();
            let gain_v = nodes[*gain].value.data();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for grow in g.chunks(c) {
                    gb.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let cn = R::from_usize(c).unwrap();
                let mut dh = vec![R::zero(); c];
                for (t, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        dh[j] = grow[j] * gain_v[j];
                    }
                    let mean_dh = dh.iter().copied().sum::<R>() / cn;
                    let mean_dh_h = kernels::dot(&dh, hrow) / cn;
                    let inv = inv_std[t];
                    for j in 0..c {
                        gx[t * c + j] += inv * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                let off = start * c;
                kernels::axpy(R::one(), g, &mut gx[off..off + g.len()]);
            }
        }
        Op::SliceCols { x, start } => {
            let w = out.cols();
            let src_c = nodes[*x].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, grow) in g.chunks(w).enumerate() {
                    let off = r * src_c + start;
                    kernels::axpy(R::one(), grow, &mut gx[off..off + w]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc_slice(nodes, grads, p, &g[off..off + n]);
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for (r, prow) in gp.chunks_mut(w).enumerate() {
                        kernels::axpy(R::one(), &g[r * total + col..r * total + col + w], prow);
                    }
                }
                col += w;
            }
        }
        Op::Reshape(a) => acc_slice(nodes, grads, *a, g),
        Op::GatherRows { x, idx } => {
            let c = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy(R::one(), &g[r * c..(r + 1) * c], &mut gx[src * c..(src + 1) * c]);
                }
            }
        }
        Op::CandidateScores { pred, pool, idx } => {
            let n = out.cols();
            let pv = &nodes[*pred].value;
            let qv = &nodes[*pool].value;
            let c = pv.cols();
            if let Some(gp) = acc(nodes, grads, *pred) {
                for m in 0..out.rows() {
                    for j in 0..n {
                        let src = idx[m * n + j];
                        kernels::axpy(g[m * n + j], &qv.data()[src * c..(src + 1) * c], &mut gp[m * c..(m + 1) * c]);
                    }
                }
            }
            if let Some(gq) = acc(nodes, grads, *pool) {
                for m in 0..out.rows() {
                    for j in 0..n {
                        let src = idx[m * n + j];
                        kernels::axpy(g[m * n + j], &pv.data()[m * c..(m + 1) * c], &mut gq[src * c..(src + 1) * c]);
                    }
                }
            }
        }
        Op::PickPerRow { x, cols } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &col) in cols.iter().enumerate() {
                    gx[r * c + col] += g[r];
                }
            }
        }
        Op::Precomputed { input, grad } => {
            if let Some(gi) = acc(nodes, grads, *input) {
                kernels::axpy(g[0], grad, gi);
            }
        }
    }
}

fn same_shape<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_2d<R: Real>(op: &'static str, a: &Tensor<R>) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a 2-D array, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

impl<'g, R: Real> Var<'g, R> {
    pub fn graph(&self) -> &'g Graph<R> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<R>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a scalar node.
    pub fn item(&self) -> R {
        self.value().data()[0]
    }

    pub fn grad(&self) -> Tensor<R> {
        self.graph.grad(*self)
    }

    fn unary(self, value: Tensor<R>, op: Op<R>) -> Var<'g, R> {
        let rg = self.graph.rg(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn map(self, f: impl Fn(R) -> R) -> Tensor<R> {
        let v = self.value();
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    fn check_same_graph(&self, other: &Var<'g, R>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    /// Strided 1-D convolution of `[T_in × C_in]` by `[C_out × C_in × k]` plus bias `[C_out]`.
    pub fn conv1d(self, kernel: Var<'g, R>, bias: Var<'g, R>, stride: usize, pad: usize) -> Result<Var<'g, R>> {
        self.check_same_graph(&kernel);
        let x = self.value();
        let w = kernel.value();
        let b = bias.value();
        let (t_in, c_in) = require_2d("conv1d", &x)?;
        if w.shape().len() != 3 {
            return Err(Error::shape("conv1d", format!("kernel must be [C_out × C_in × k], got {:?}", w.shape())));
        }
        let (c_out, kc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if kc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("kernel expects C_in = {kc_in} but input has C_in = {c_in}"),
            ));
        }
        if b.shape() != [c_out] {
            return Err(Error::shape("conv1d", format!("bias {:?} does not match C_out = {c_out}", b.shape())));
        }
        let t_out = conv_output_len(t_in, k, stride, pad).ok_or_else(|| {
            Error::shape("conv1d", format!("kernel {k} longer than padded input {}", t_in + 2 * pad))
        })?;
        let geom = ConvGeom {
            t_in,
            c_in,
            c_out,
            k,
            stride,
            pad,
            t_out,
        };
        let out = kernels::conv1d_forward(x.data(), w.data(), b.data(), &geom);
        drop((x, w, b));
        let rg = self.graph.rg(&[self.id, kernel.id, bias.id]);
        Ok(self.graph.push(
            Tensor::new(vec![t_out, c_out], out)?,
            Op::Conv1d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                geom,
            },
            rg,
        ))
    }

    pub fn matmul(self, other: Var<'g, R>) -> Result<Var<'g, R>> {
        self.check_same_graph(&other);
        let a = self.value();
        let b = other.value();
        let (m, k) = require_2d("matmul", &a)?;
        let (k2, n) = require_2d("matmul", &b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        drop((a, b));
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: self.id, b: other.id }, rg))
    }

    /// `x · wᵀ + b` for `x: [M × In]`, `w: [Out × In]`, `b: [Out]`.
    pub fn affine(self, w: Var<'g, R>, b: Var<'g, R>) -> Result<Var<'g, R>> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let (m, k) = require_2d("affine", &x)?;
        let (n, k2) = require_2d("affine", &wv)?;
        if k != k2 || bv.shape() != [n] {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, weight {:?}, bias {:?}", x.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out: Vec<R> = (0..m).flat_map(|_| bv.data().iter().copied()).collect();
        kernels::matmul_nt_acc(x.data(), wv.data(), &mut out, m, k, n);
        drop((x, wv, bv));
        let rg = self.graph.rg(&[self.id, w.id, b.id]);
        Ok(self.graph.push(
            Tensor::new(vec![m, n], out)?,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        ))
    }

    pub fn transpose(self) -> Result<Var<'g, R>> {
        let a = self.value();
        let (r, c) = require_2d("transpose", &a)?;
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        drop(a);
        Ok(self.unary(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id)))
    }

    fn binary(self, other: Var<'g, R>, name: &'static str, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        self.check_same_graph(&other);
        let a = self.value();
        let b = other.value();
        same_shape(name, &a, &b)?;
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(self, other: Var<'g, R>) -> Result<Var<'g, R>> {
        let v = self.binary(other, "add", |a, b| a + b)?;
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(self, other: Var<'g, R>) -> Result<Var<'g, R>> {
        let v = self.binary(other, "sub", |a, b| a - b)?;
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(self, other: Var<'g, R>) -> Result<Var<'g, R>> {
        let v = self.binary(other, "mul", |a, b| a * b)?;
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(self, s: R) -> Var<'g, R> {
        let v = self.map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: R) -> Var<'g, R> {
        let v = self.map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn tanh(self) -> Var<'g, R> {
        let v = self.map(R::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g, R> {
        let v = self.map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'g, R> {
        let v = self.map(|x| if x > R::zero() { x } else { R::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sum(self) -> Var<'g, R> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, R> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<R>() / R::from_usize(v.len()).unwrap();
        drop(v);
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Row-wise log-softmax over the trailing dimension.
    pub fn log_softmax(self) -> Result<Var<'g, R>> {
        let v = self.value();
        let c = v.cols();
        if v.is_empty() {
            return Err(Error::shape("log_softmax", "empty input"));
        }
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let lse = kernels::log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self.unary(t, Op::LogSoftmax(self.id)))
    }

    /// Softmax of row `i` over columns `0..=i` of a square array; zeros above the diagonal.
    pub fn causal_softmax(self) -> Result<Var<'g, R>> {
        let v = self.value();
        let (r, c) = require_2d("causal_softmax", &v)?;
        if r != c {
            return Err(Error::shape("causal_softmax", format!("expected square, got [{r}×{c}]")));
        }
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let row = &v.data()[i * c..i * c + i + 1];
            let lse = kernels::log_sum_exp(row);
            for j in 0..=i {
                out[i * c + j] = (row[j] - lse).exp();
            }
        }
        drop(v);
        Ok(self.unary(Tensor::new(vec![r, c], out)?, Op::CausalSoftmax(self.id)))
    }

    /// Per-row standardisation over the channel axis with affine `gain`/`bias`.
    pub fn channel_norm(self, gain: Var<'g, R>, bias: Var<'g, R>, eps: R) -> Result<Var<'g, R>> {
        let x = self.value();
        let (t, c) = require_2d("channel_norm", &x)?;
        if c < 2 {
            return Err(Error::shape(
                "channel_norm",
                "needs at least 2 channels (a single channel has zero variance)",
            ));
        }
        let gv = gain.value();
        let bv = bias.value();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "channel_norm",
                format!("gain {:?} / bias {:?} vs {c} channels", gv.shape(), bv.shape()),
            ));
        }
        let cn = R::from_usize(c).unwrap();
        let mut xhat = Vec::with_capacity(t * c);
        let mut inv_std = Vec::with_capacity(t);
        let mut out = Vec::with_capacity(t * c);
        for row in x.data().chunks(c) {
            let mean = row.iter().copied().sum::<R>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / cn;
            let inv = R::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(gv.data()[j] * h + bv.data()[j]);
            }
        }
        drop((x, gv, bv));
        let rg = self.graph.rg(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            Tensor::new(vec![t, c], out)?,
            Op::ChannelNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g, R>> {
        let v = self.value();
        let (r, c) = require_2d("slice_rows", &v)?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let t = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        drop(v);
        Ok(self.unary(t, Op::SliceRows { x: self.id, start }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g, R>> {
        let v = self.value();
        let (r, c) = require_2d("slice_cols", &v)?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let data = (0..r).flat_map(|i| v.data()[i * c + start..i * c + start + len].iter().copied()).collect();
        drop(v);
        Ok(self.unary(Tensor::new(vec![r, len], data)?, Op::SliceCols { x: self.id, start }))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g, R>> {
        let t = self.value().clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Rows `idx[i]` of a 2-D array, in order (repeats allowed).
    pub fn gather_rows(self, idx: Vec<usize>) -> Result<Var<'g, R>> {
        let v = self.value();
        let (r, c) = require_2d("gather_rows", &v)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let data = idx.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
        let t = Tensor::new(vec![idx.len(), c], data)?;
        drop(v);
        Ok(self.unary(t, Op::GatherRows { x: self.id, idx }))
    }

    /// `out[m][j] = self[m] · pool[idx[m·n + j]]` for `n = n_cand` candidates per row.
    pub fn candidate_scores(self, pool: Var<'g, R>, idx: Vec<usize>, n_cand: usize) -> Result<Var<'g, R>> {
        self.check_same_graph(&pool);
        let p = self.value();
        let q = pool.value();
        let (m, c) = require_2d("candidate_scores", &p)?;
        let (rows, c2) = require_2d("candidate_scores", &q)?;
        if c != c2 || idx.len() != m * n_cand {
            return Err(Error::shape(
                "candidate_scores",
                format!("preds {:?}, pool {:?}, {} indices for {n_cand} candidates", p.shape(), q.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("candidate_scores", format!("candidate row {bad} of {rows}")));
        }
        let mut out = Vec::with_capacity(m * n_cand);
        for i in 0..m {
            let pr = p.row(i);
            for j in 0..n_cand {
                out.push(kernels::dot(pr, q.row(idx[i * n_cand + j])));
            }
        }
        drop((p, q));
        let rg = self.graph.rg(&[self.id, pool.id]);
        Ok(self.graph.push(
            Tensor::new(vec![m, n_cand], out)?,
            Op::CandidateScores {
                pred: self.id,
                pool: pool.id,
                idx,
            },
            rg,
        ))
    }

    /// `out[r] = self[r][cols[r]]`.
    pub fn pick_per_row(self, cols: Vec<usize>) -> Result<Var<'g, R>> {
        let v = self.value();
        let (r, c) = require_2d("pick_per_row", &v)?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick_per_row", format!("{} picks into [{r}×{c}]", cols.len())));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| v.data()[i * c + j]).collect();
        drop(v);
        Ok(self.unary(Tensor::new(vec![r], data)?, Op::PickPerRow { x: self.id, cols }))
    }

    /// Registers a scalar whose value and gradient w.r.t. `self` were computed externally.
    pub fn precomputed_scalar(self, value: R, grad: Vec<R>) -> Result<Var<'g, R>> {
        if grad.len() != self.value().len() {
            return Err(Error::shape("precomputed_scalar", "gradient length differs from input"));
        }
        Ok(self.unary(Tensor::scalar(value), Op::Precomputed { input: self.id, grad }))
    }
}

pub fn concat_rows<'g, R: Real>(parts: &[Var<'g, R>]) -> Result<Var<'g, R>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
    let g = first.graph;
    let c = first.value().cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let v = p.value();
        let (r, pc) = require_2d("concat_rows", &v)?;
        if pc != c {
            return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
        }
        rows += r;
        data.extend_from_slice(v.data());
    }
    let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
    let rg = g.rg(&ids);
    Ok(g.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(ids), rg))
}

pub fn concat_cols<'g, R: Real>(parts: &[Var<'g, R>]) -> Result<Var<'g, R>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
    let g = first.graph;
    let r = first.value().rows();
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    for v in &vals {
        let (pr, _) = require_2d("concat_cols", v)?;
        if pr != r {
            return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
        }
    }
    let total: usize = vals.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for v in &vals {
            data.extend_from_slice(v.row(i));
        }
    }
    drop(vals);
    let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
    let rg = g.rg(&ids);
    Ok(g.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(ids), rg))
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}
