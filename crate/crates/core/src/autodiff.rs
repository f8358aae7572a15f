//! Reverse-mode automatic differentiation over an eager tape.
//!
//! Every operation is evaluated immediately and appended to the tape. Backward
//! passes are themselves expressed as tape operations, so a gradient computed
//! with `create_graph = true` can be differentiated again. Passing
//! `create_graph = false` evaluates the same backward rules and then truncates
//! the tape, returning the gradients as constant leaves.

use std::rc::Rc;

use crate::attention::clip_normalize;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a value on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize, Vec<usize>),
    /// `[a, b, c] -> [b, a, c]`.
    Swap01(usize, [usize; 3]),
    Relu(usize),
    /// `gy * 1[x > 0]`; args are `(gy, x)`.
    ReluGrad(usize, usize),
    Abs(usize),
    /// `gy * sign(x)`; args are `(gy, x)`.
    AbsGrad(usize, usize),
    Exp(usize),
    Log(usize),
    Rsqrt(usize),
    SumAll(usize),
    BroadcastScalar(usize, Vec<usize>),
    /// `[m, n] -> [n]`.
    SumRows(usize),
    /// `[n] -> [m, n]`.
    TileRows(usize, usize),
    /// `[m, n] -> [m]`.
    SumCols(usize),
    /// `[m] -> [m, n]`.
    ExpandCols(usize, usize),
    Im2Col(usize, ConvGeom),
    Col2Im(usize, ConvGeom),
    MaxPool(usize, PoolGeom),
    /// Input-shaped gradient from output-shaped values; args `(g, pool node)`.
    PoolScatter(usize, usize),
    /// Output-shaped values read from an input-shaped tensor; args `(g, pool node)`.
    PoolGather(usize, usize),
    /// Clip-and-normalize forward with identity backward.
    ClipNorm(usize, f64),
    /// Row maximum of a 2-D tensor, treated as a constant.
    RowMax(usize),
    Detach(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            ReluGrad(a, b) | AbsGrad(a, b) => vec![a, b],
            PoolScatter(a, p) | PoolGather(a, p) => vec![a, p],
            Scale(a, _) | AddConst(a, _) | Transpose(a) | Swap01(a, _) | Relu(a) | Abs(a) => vec![a],
            Reshape(a, _) | BroadcastScalar(a, _) => vec![a],
            Exp(a) | Log(a) | Rsqrt(a) | SumAll(a) | SumRows(a) | SumCols(a) => vec![a],
            TileRows(a, _) | ExpandCols(a, _) | Im2Col(a, _) | Col2Im(a, _) | MaxPool(a, _) => vec![a],
            ClipNorm(a, _) | RowMax(a) | Detach(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    argmax: Option<Rc<Vec<usize>>>,
}

/// An eager computation record.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    depth: u8,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn two_d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape_err!("{what} needs a 2-D tensor, got {:?}", s)),
    }
}

impl Graph {
    /// A record that supports gradients of gradients.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), depth: 2 }
    }

    /// A record limited to first-order gradients.
    pub fn first_order() -> Self {
        Graph { nodes: Vec::new(), depth: 1 }
    }

    pub fn depth(&self) -> u8 {
        self.depth
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, argmax: None });
        Var(self.nodes.len() - 1)
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Option<Rc<Vec<usize>>>)> {
        use Op::*;
        let v = |i: usize| &self.nodes[i].value;
        let t = match op {
            Leaf => return Err(Error::State("leaf has no rule".into())),
            Add(a, b) => v(*a).add(v(*b))?,
            Sub(a, b) => v(*a).sub(v(*b))?,
            Mul(a, b) => v(*a).mul(v(*b))?,
            Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y)?,
            Scale(a, s) => v(*a).scale(*s),
            AddConst(a, c) => v(*a).map(|x| x + c),
            MatMul(a, b) => v(*a).matmul(v(*b))?,
            Transpose(a) => v(*a).transpose()?,
            Reshape(a, s) => v(*a).clone().reshape(s)?,
            Swap01(a, [p, q, r]) => {
                let src = v(*a);
                if src.len() != p * q * r {
                    return Err(shape_err!("swap01 of {:?} as [{p},{q},{r}]", src.shape()));
                }
                let d = src.data();
                let mut out = vec![0.0; d.len()];
                for i in 0..*p {
                    for j in 0..*q {
                        out[(j * p + i) * r..][..*r].copy_from_slice(&d[(i * q + j) * r..][..*r]);
                    }
                }
                Tensor::new(vec![*q, *p, *r], out)?
            }
            Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            ReluGrad(g, x) => v(*g).zip_map(v(*x), |g, x| if x > 0.0 { g } else { 0.0 })?,
            Abs(a) => v(*a).map(f64::abs),
            AbsGrad(g, x) => v(*g).zip_map(v(*x), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })?,
            Exp(a) => v(*a).map(f64::exp),
            Log(a) => v(*a).map(f64::ln),
            Rsqrt(a) => v(*a).map(|x| 1.0 / x.sqrt()),
            SumAll(a) => Tensor::scalar(v(*a).sum()),
            BroadcastScalar(a, s) => {
                if v(*a).len() != 1 {
                    return Err(shape_err!("broadcast of non-scalar {:?}", v(*a).shape()));
                }
                Tensor::full(s, v(*a).item())
            }
            SumRows(a) => {
                let (m, n) = two_d(v(*a), "sum_rows")?;
                let d = v(*a).data();
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                Tensor::new(vec![n], out)?
            }
            TileRows(a, m) => {
                let d = v(*a).data();
                let mut out = Vec::with_capacity(d.len() * m);
                for _ in 0..*m {
                    out.extend_from_slice(d);
                }
                Tensor::new(vec![*m, d.len()], out)?
            }
            SumCols(a) => {
                let (m, n) = two_d(v(*a), "sum_cols")?;
                let d = v(*a).data();
                Tensor::new(vec![m], (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect())?
            }
            ExpandCols(a, n) => {
                let d = v(*a).data();
                let mut out = Vec::with_capacity(d.len() * n);
                for &x in d {
                    out.extend(std::iter::repeat(x).take(*n));
                }
                Tensor::new(vec![d.len(), *n], out)?
            }
            Im2Col(a, g) => {
                if v(*a).len() != g.input_len() {
                    return Err(shape_err!("im2col input {:?} vs {:?}", v(*a).shape(), g));
                }
                Tensor::new(vec![g.col_rows(), g.col_cols()], kernels::im2col(v(*a).data(), g))?
            }
            Col2Im(a, g) => {
                if v(*a).len() != g.col_rows() * g.col_cols() {
                    return Err(shape_err!("col2im input {:?} vs {:?}", v(*a).shape(), g));
                }
                Tensor::new(vec![g.batch, g.channels, g.height, g.width], kernels::col2im(v(*a).data(), g))?
            }
            MaxPool(a, g) => {
                if v(*a).len() != g.input_len() {
                    return Err(shape_err!("max_pool input {:?} vs {:?}", v(*a).shape(), g));
                }
                let (out, idx) = kernels::max_pool(v(*a).data(), g);
                let t = Tensor::new(vec![g.batch, g.channels, g.out_h(), g.out_w()], out)?;
                return Ok((t, Some(Rc::new(idx))));
            }
            PoolScatter(a, p) => {
                let Op::MaxPool(src, _) = &self.nodes[*p].op else {
                    return Err(Error::State("pool scatter without pool node".into()));
                };
                let idx = self.nodes[*p].argmax.as_ref().expect("pool node records argmax");
                let shape = v(*src).shape().to_vec();
                Tensor::new(shape, kernels::pool_scatter(v(*a).data(), idx, v(*src).len()))?
            }
            PoolGather(a, p) => {
                let idx = self.nodes[*p].argmax.as_ref().expect("pool node records argmax");
                let shape = self.nodes[*p].value.shape().to_vec();
                Tensor::new(shape, kernels::pool_gather(v(*a).data(), idx))?
            }
            ClipNorm(a, rho) => Tensor::new(v(*a).shape().to_vec(), clip_normalize(v(*a).data(), *rho)?)?,
            RowMax(a) => {
                let (m, n) = two_d(v(*a), "row_max")?;
                let d = v(*a).data();
                let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                Tensor::new(vec![m], out.collect())?
            }
            Detach(a) => v(*a).clone(),
        };
        Ok((t, None))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, argmax) = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?}", op)));
        }
        self.nodes.push(Node { op, value, argmax });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Re-evaluates every non-leaf node, optionally replacing leaf values first.
    pub fn replay(&mut self, leaves: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in leaves {
            let node = &mut self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::Invalid(format!("node {} is not a leaf", v.0)));
            }
            if node.value.shape() != t.shape() {
                return Err(shape_err!("replay leaf {:?} vs {:?}", node.value.shape(), t.shape()));
            }
            node.value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, argmax) = self.eval(&self.nodes[i].op)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("replay node {i}")));
            }
            self.nodes[i].value = value;
            self.nodes[i].argmax = argmax;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a.0, b.0))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a.0, b.0))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a.0, b.0))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a.0, b.0))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a.0, s))
    }
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddConst(a.0, c))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a.0, b.0))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a.0))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape(a.0, shape.to_vec()))
    }
    pub fn swap01(&mut self, a: Var, dims: [usize; 3]) -> Result<Var> {
        self.push(Op::Swap01(a.0, dims))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a.0))
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a.0))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a.0))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a.0))
    }
    pub fn rsqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Rsqrt(a.0))
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a.0))
    }
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::BroadcastScalar(a.0, shape.to_vec()))
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a.0))
    }
    pub fn tile_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        self.push(Op::TileRows(a.0, m))
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a.0))
    }
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::ExpandCols(a.0, n))
    }
    pub fn im2col(&mut self, a: Var, g: ConvGeom) -> Result<Var> {
        self.push(Op::Im2Col(a.0, g))
    }
    pub fn col2im(&mut self, a: Var, g: ConvGeom) -> Result<Var> {
        self.push(Op::Col2Im(a.0, g))
    }
    pub fn max_pool(&mut self, a: Var, g: PoolGeom) -> Result<Var> {
        self.push(Op::MaxPool(a.0, g))
    }
    pub fn clip_norm(&mut self, a: Var, rho: f64) -> Result<Var> {
        self.push(Op::ClipNorm(a.0, rho))
    }
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach(a.0))
    }
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowMax(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Multiplies `a` elementwise by a scalar-shaped var.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_scalar(s, &shape)?;
        self.mul(a, b)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "softmax")?;
        let mx = self.row_max(a)?;
        let mx = self.expand_cols(mx, n)?;
        let z = self.sub(a, mx)?;
        let e = self.exp(z)?;
        let s = self.sum_cols(e)?;
        let s = self.expand_cols(s, n)?;
        let out = self.div(e, s)?;
        debug_assert_eq!(self.shape(out), &[m, n]);
        Ok(out)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err!("mse {:?} vs {:?}", self.shape(pred), target.shape()));
        }
        let t = self.leaf(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Mean softmax cross-entropy of `[B, N]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, n) = two_d(self.value(logits), "cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&l| l >= n) {
            return Err(shape_err!("cross_entropy labels {:?} for logits [{b},{n}]", labels));
        }
        let mut onehot = vec![0.0; b * n];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * n + l] = 1.0;
        }
        let mx = self.row_max(logits)?;
        let mxe = self.expand_cols(mx, n)?;
        let z = self.sub(logits, mxe)?;
        let e = self.exp(z)?;
        let s = self.sum_cols(e)?;
        let lse = self.log(s)?;
        let oh = self.leaf(Tensor::new(vec![b, n], onehot)?);
        let picked = self.mul(z, oh)?;
        let picked = self.sum_cols(picked)?;
        let per = self.sub(lse, picked)?;
        self.mean_all(per)
    }

    /// Gradients of `output` (seeded by `seed`, default ones) with respect to `wrt`.
    ///
    /// With `create_graph` the returned vars are differentiable functions of the
    /// tape; otherwise they are fresh constant leaves.
    pub fn grad(&mut self, output: Var, wrt: &[Var], seed: Option<Tensor>, create_graph: bool) -> Result<Vec<Var>> {
        if create_graph && self.depth < 2 {
            return Err(Error::State("create_graph on a depth-1 record".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::State("output not on this record".into()));
        }
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.shape(output) {
                    return Err(shape_err!("seed {:?} vs output {:?}", s.shape(), self.shape(output)));
                }
                s
            }
            None => Tensor::ones(self.shape(output)),
        };
        let mark = self.nodes.len();
        let n = output.0 + 1;
        let mut need = vec![false; n];
        for w in wrt {
            if w.0 < n {
                need[w.0] = true;
            }
        }
        for i in 0..n {
            if !need[i] && self.nodes[i].op.inputs().iter().any(|&j| need[j]) {
                need[i] = true;
            }
        }
        let mut grads: Vec<Option<usize>> = vec![None; n];
        if need[output.0] {
            grads[output.0] = Some(self.leaf(seed).0);
        }
        for i in (0..n).rev() {
            let Some(gy) = grads[i] else { continue };
            if !need[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (j, gj) in self.backward_rule(&op, i, gy)? {
                if !need[j] {
                    continue;
                }
                grads[j] = Some(match grads[j] {
                    None => gj,
                    Some(prev) => self.push(Op::Add(prev, gj))?.0,
                });
            }
        }
        let results: Vec<Tensor> = wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => self.nodes[g].value.clone(),
                None => Tensor::zeros(self.nodes[w.0].value.shape()),
            })
            .collect();
        if create_graph {
            let mut out = Vec::with_capacity(wrt.len());
            for (w, t) in wrt.iter().zip(results) {
                out.push(match grads.get(w.0).copied().flatten() {
                    Some(g) => Var(g),
                    None => self.leaf(t),
                });
            }
            Ok(out)
        } else {
            self.nodes.truncate(mark);
            Ok(results.into_iter().map(|t| self.leaf(t)).collect())
        }
    }

    /// Convenience: gradient values only.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let gs = self.grad(output, wrt, None, false)?;
        let out = gs.iter().map(|g| self.value(*g).clone()).collect();
        let keep = self.nodes.len() - gs.len();
        self.nodes.truncate(keep);
        Ok(out)
    }

    fn backward_rule(&mut self, op: &Op, out: usize, gy: usize) -> Result<Vec<(usize, usize)>> {
        use Op::*;
        let shape_of = |g: &Graph, i: usize| g.nodes[i].value.shape().to_vec();
        Ok(match *op {
            Leaf | RowMax(_) | Detach(_) => vec![],
            Add(a, b) => vec![(a, gy), (b, gy)],
            Sub(a, b) => {
                let nb = self.push(Scale(gy, -1.0))?.0;
                vec![(a, gy), (b, nb)]
            }
            Mul(a, b) => {
                let ga = self.push(Mul(gy, b))?.0;
                let gb = self.push(Mul(gy, a))?.0;
                vec![(a, ga), (b, gb)]
            }
            Div(a, b) => {
                let ga = self.push(Div(gy, b))?.0;
                let t = self.push(Div(ga, b))?.0;
                let t = self.push(Mul(t, a))?.0;
                let gb = self.push(Scale(t, -1.0))?.0;
                vec![(a, ga), (b, gb)]
            }
            Scale(a, s) => vec![(a, self.push(Scale(gy, s))?.0)],
            AddConst(a, _) | ClipNorm(a, _) => vec![(a, gy)],
            MatMul(a, b) => {
                let bt = self.push(Transpose(b))?.0;
                let ga = self.push(MatMul(gy, bt))?.0;
                let at = self.push(Transpose(a))?.0;
                let gb = self.push(MatMul(at, gy))?.0;
                vec![(a, ga), (b, gb)]
            }
            Transpose(a) => vec![(a, self.push(Transpose(gy))?.0)],
            Reshape(a, _) => {
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(gy, s))?.0)]
            }
            Swap01(a, [p, q, r]) => {
                let g = self.push(Swap01(gy, [q, p, r]))?.0;
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(g, s))?.0)]
            }
            Relu(a) => vec![(a, self.push(ReluGrad(gy, a))?.0)],
            ReluGrad(g, x) => vec![(g, self.push(ReluGrad(gy, x))?.0)],
            Abs(a) => vec![(a, self.push(AbsGrad(gy, a))?.0)],
            AbsGrad(g, x) => vec![(g, self.push(AbsGrad(gy, x))?.0)],
            Exp(a) => vec![(a, self.push(Mul(gy, out))?.0)],
            Log(a) => vec![(a, self.push(Div(gy, a))?.0)],
            Rsqrt(a) => {
                let sq = self.push(Mul(out, out))?.0;
                let cube = self.push(Mul(sq, out))?.0;
                let c = self.push(Scale(cube, -0.5))?.0;
                vec![(a, self.push(Mul(gy, c))?.0)]
            }
            SumAll(a) => {
                let s = shape_of(self, a);
                vec![(a, self.push(BroadcastScalar(gy, s))?.0)]
            }
            BroadcastScalar(a, _) => {
                let g = self.push(SumAll(gy))?.0;
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(g, s))?.0)]
            }
            SumRows(a) => {
                let m = self.nodes[a].value.shape()[0];
                vec![(a, self.push(TileRows(gy, m))?.0)]
            }
            TileRows(a, _) => {
                let g = self.push(SumRows(gy))?.0;
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(g, s))?.0)]
            }
            SumCols(a) => {
                let n = self.nodes[a].value.shape()[1];
                vec![(a, self.push(ExpandCols(gy, n))?.0)]
            }
            ExpandCols(a, _) => {
                let g = self.push(SumCols(gy))?.0;
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(g, s))?.0)]
            }
            Im2Col(a, g) => {
                let r = self.push(Col2Im(gy, g))?.0;
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(r, s))?.0)]
            }
            Col2Im(a, g) => {
                let r = self.push(Im2Col(gy, g))?.0;
                let s = shape_of(self, a);
                vec![(a, self.push(Reshape(r, s))?.0)]
            }
            MaxPool(a, _) => vec![(a, self.push(PoolScatter(gy, out))?.0)],
            PoolScatter(g, p) => vec![(g, self.push(PoolGather(gy, p))?.0)],
            PoolGather(g, p) => {
                let r = self.push(PoolScatter(gy, p))?.0;
                let s = shape_of(self, g);
                vec![(g, self.push(Reshape(r, s))?.0)]
            }
        })
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_oracle<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at index {i}")));
        }
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// Result of differentiating a query loss through an unrolled inner loop.
#[derive(Debug, Clone)]
pub struct MetaGrad {
    pub loss: f64,
    /// Gradient with respect to the initial parameters.
    pub params: Vec<Tensor>,
    /// Gradient with respect to each step size, indexed `[step][param]`.
    pub step_sizes: Vec<Vec<f64>>,
}

/// Differentiates `outer(w^K)` with respect to `w^0` and the step sizes, where
/// `w^k = w^{k-1} - step_sizes[k-1][p] * grad inner(w^{k-1})`.
///
/// `first_order` treats every inner gradient as a constant.
pub fn grad_of_grad<FI, FO>(
    params: &[Tensor],
    step_sizes: &[Vec<f64>],
    first_order: bool,
    inner: FI,
    outer: FO,
) -> Result<MetaGrad>
where
    FI: Fn(&mut Graph, &[Var]) -> Result<Var>,
    FO: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step_sizes.iter().any(|s| s.len() != params.len()) {
        return Err(Error::Invalid("one step size per parameter and step is required".into()));
    }
    let mut g = if first_order { Graph::first_order() } else { Graph::new() };
    let w0: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let alphas: Vec<Vec<Var>> =
        step_sizes.iter().map(|row| row.iter().map(|&a| g.leaf(Tensor::scalar(a))).collect()).collect();
    let mut w = w0.clone();
    for row in &alphas {
        let loss = inner(&mut g, &w)?;
        let grads = g.grad(loss, &w, None, !first_order)?;
        let mut next = Vec::with_capacity(w.len());
        for ((wp, gp), a) in w.iter().zip(&grads).zip(row) {
            let step = g.mul_scalar(*gp, *a)?;
            next.push(g.sub(*wp, step)?);
        }
        w = next;
    }
    let loss = outer(&mut g, &w)?;
    let value = g.value(loss).item();
    let mut wrt = w0.clone();
    wrt.extend(alphas.iter().flatten().copied());
    let grads = g.grad_values(loss, &wrt)?;
    let (pg, ag) = grads.split_at(w0.len());
    let step_sizes = ag.chunks(params.len().max(1)).map(|c| c.iter().map(|t| t.item()).collect()).collect();
    Ok(MetaGrad { loss: value, params: pg.to_vec(), step_sizes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn scalar_product_rule() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[1, 1], &[2.0]));
        let x = g.leaf(t(&[1, 1], &[3.0]));
        let y = g.matmul(w, x).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let gs = g.grad_values(y, &[x, w]).unwrap();
        assert_eq!(gs[0].data(), &[2.0]);
        assert_eq!(gs[1].data(), &[3.0]);
    }

    #[test]
    fn relu_forward_and_gate() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        let gs = g.grad_values(y, &[x]).unwrap();
        assert_eq!(gs[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn second_order_quadratic() {
        for &w in &[0.5, -1.5, 3.0] {
            let mg = grad_of_grad(
                &[Tensor::scalar(w)],
                &[vec![0.1]],
                false,
                |g, p| g.mul(p[0], p[0]),
                |g, p| g.mul(p[0], p[0]),
            )
            .unwrap();
            assert!((mg.params[0].item() - 1.28 * w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_is_plain_gradient() {
        let mg = grad_of_grad(&[Tensor::scalar(2.0)], &[], false, |g, p| g.mul(p[0], p[0]), |g, p| {
            let s = g.mul(p[0], p[0])?;
            g.mul(s, p[0])
        })
        .unwrap();
        assert!((mg.params[0].item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn create_graph_rejected_on_depth_one() {
        let mut g = Graph::first_order();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.grad(y, &[x], None, true), Err(Error::State(_))));
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.grad(x, &[x], Some(Tensor::zeros(&[3])), false).is_err());
    }

    #[test]
    fn fd_oracle_basics() {
        let x = Tensor::scalar(3.0);
        let d = finite_diff_oracle(|x| Ok(x.item() * x.item()), &x, 1e-6).unwrap();
        assert!((d.item() - 6.0).abs() < 1e-6);
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let d = finite_diff_oracle(|x| Ok(x.sum()), &x, 1e-6).unwrap();
        assert!(d.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(finite_diff_oracle(|x| Ok(x.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn replay_is_bitwise_stable() {
        let mut rng = Rng::new(11);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let w = g.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let y = g.matmul(x, w).unwrap();
        let y = g.relu(y).unwrap();
        let s = g.softmax_rows(y).unwrap();
        let before = g.value(s).clone();
        g.replay(&[]).unwrap();
        assert_eq!(g.value(s).data(), before.data());
    }
}
