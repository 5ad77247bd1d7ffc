//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value and a record
//! of its inputs. Node indices are a topological order by construction, so
//! the backward sweep is a single reverse pass over the list.

use std::collections::HashMap;

use crate::array::{gemm, gemm_at, gemm_bt, Array};
use crate::error::AutodiffError;
use crate::params::{Gradients, ParamStore};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// rhs shape is a proper suffix of lhs shape and repeats over the leading extents.
    Leading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    Softplus,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Bcast),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { x: Var, w: Var, dilation: usize },
    AddCol(Var, Var),
    Sum(Var),
    Mean(Var),
    SliceRows { x: Var, start: usize },
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    RowMeans(Var),
}

/// One entry of the tape: forward value, accumulated gradient, provenance.
#[derive(Debug)]
pub struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn grad(&self) -> Option<&Array> {
        self.grad.as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    backward_done: bool,
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss with respect to `v`, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Array, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers the named parameter from `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- elementwise ---------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).is_scalar() {
            Ok(Bcast::Scalar)
        } else if sb.len() < sa.len() && sa.ends_with(sb) {
            Ok(Bcast::Leading)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Leading => bv[i % nb],
                };
                f(x, y)
            })
            .collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push_checked(name, value, Op::Binary(kind, a, b, bc), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Tanh => ("tanh", f64::tanh),
            UnaryKind::Sigmoid => ("sigmoid", sigmoid),
            UnaryKind::Relu => ("relu", |x| x.max(0.0)),
            UnaryKind::Abs => ("abs", f64::abs),
            UnaryKind::Softplus => ("softplus", softplus),
            UnaryKind::Square => ("square", |x| x * x),
        };
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push_checked(name, value, Op::Unary(kind, a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push_checked("scale", value, Op::Scale(a, c), ng)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(AutodiffError::InnerExtent {
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        let value = Array::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("expected rank 2, got shape {:?}", av.shape()),
            });
        }
        let value = av.transpose();
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Same-padded 1-D cross-correlation.
    ///
    /// `x` is `[in × length]`, `w` is `[out × in × kernel]`; the result is
    /// `[out × length]`. Out-of-range taps read zero.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 3 || wv.shape()[1] != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let kernel = wv.shape()[2];
        if kernel % 2 == 0 {
            return Err(AutodiffError::EvenKernel(kernel));
        }
        if dilation == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv1d",
                reason: "dilation must be positive".into(),
            });
        }
        let (cin, len, cout) = (xv.rows(), xv.cols(), wv.shape()[0]);
        let cols = im2col(xv.data(), cin, len, kernel, dilation);
        let mut out = vec![0.0; cout * len];
        gemm(wv.data(), &cols, &mut out, cout, cin * kernel, len);
        let value = Array::new(vec![cout, len], out)?;
        let ng = self.ng(x) || self.ng(w);
        self.push_checked("conv1d", value, Op::Conv1d { x, w, dilation }, ng)
    }

    /// Adds `v[m]` to every column of `x[m×n]` (per-channel bias in channel-first layout).
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if xv.rank() != 2 || vv.len() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_col",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let n = xv.cols();
        let vd = vv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vd[i / n])
            .collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(v);
        self.push_checked("add_col", value, Op::AddCol(x, v), ng)
    }

    // ---- reductions and structural ops ---------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Array::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push_checked("sum", value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Array::scalar(av.sum() / av.len() as f64);
        let ng = self.ng(a);
        self.push_checked("mean", value, Op::Mean(a), ng)
    }

    /// Rows `start..end` of a rank-2 array.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start >= end || end > xv.rows() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} invalid for shape {:?}", xv.shape()),
            });
        }
        let n = xv.cols();
        let value = Array::new(vec![end - start, n], xv.data()[start * n..end * n].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceRows { x, start }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_rows",
                reason: format!("expected rank 2, got shape {:?}", xv.shape()),
            });
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push_checked("softmax_rows", value, Op::SoftmaxRows(x), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm_rows",
                reason: format!("expected rank 2, got shape {:?}", xv.shape()),
            });
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            inv_std.push(r);
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push_checked("layer_norm_rows", value, Op::LayerNormRows { x, inv_std }, ng)
    }

    /// Row lookup: output row `i` is `table[idx[i]]`. Covers embedding tables
    /// and length regulation.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: format!("expected rank 2 table, got shape {:?}", tv.shape()),
            });
        }
        let (rows, n) = (tv.rows(), tv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&tv.data()[i * n..(i + 1) * n]);
        }
        let value = Array::new(vec![idx.len(), n], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over the columns of each row: `[m×n] -> [m]`.
    pub fn row_means(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "row_means",
                reason: format!("expected rank 2, got shape {:?}", xv.shape()),
            });
        }
        let n = xv.cols();
        let data = xv.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let value = Array::new(vec![xv.rows()], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::RowMeans(x), ng))
    }

    // ---- backward ------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every reachable node.
    ///
    /// A tape supports exactly one backward sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let seed = Array::ones(lv.shape());
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    /// Gradients of every registered parameter; unreached parameters get zeros.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let node = &self.nodes[v.0];
            let g = node
                .grad
                .clone()
                .unwrap_or_else(|| Array::zeros(node.value.shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    fn local_grads(&self, i: usize, g: &Array) -> Vec<(Var, Array)> {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b, bc) => {
                let (a, b, bc) = (*a, *b, *bc);
                let mut res = Vec::with_capacity(2);
                let bd = val(b).data();
                let nb = bd.len();
                let b_at = |idx: usize| match bc {
                    Bcast::Same => bd[idx],
                    Bcast::Scalar => bd[0],
                    Bcast::Leading => bd[idx % nb],
                };
                if ng(a) {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => Array::from_fn(g.shape(), |idx| g.data()[idx] * b_at(idx)),
                    };
                    res.push((a, da));
                }
                if ng(b) {
                    let ad = val(a).data();
                    let mut db = vec![0.0; nb];
                    for (idx, &gv) in g.data().iter().enumerate() {
                        let contrib = match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * ad[idx],
                        };
                        let slot = match bc {
                            Bcast::Same => idx,
                            Bcast::Scalar => 0,
                            Bcast::Leading => idx % nb,
                        };
                        db[slot] += contrib;
                    }
                    res.push((b, Array::new(val(b).shape().to_vec(), db).expect("shape")));
                }
                res
            }
            Op::Unary(kind, a) => {
                let x = val(*a);
                let d = match kind {
                    UnaryKind::Tanh => out.zip_map(g, |y, gv| gv * (1.0 - y * y)),
                    UnaryKind::Sigmoid => out.zip_map(g, |y, gv| gv * y * (1.0 - y)),
                    UnaryKind::Relu => x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 }),
                    UnaryKind::Abs => x.zip_map(g, |xv, gv| gv * xv.signum() * (xv != 0.0) as u8 as f64),
                    UnaryKind::Softplus => x.zip_map(g, |xv, gv| gv * sigmoid(xv)),
                    UnaryKind::Square => x.zip_map(g, |xv, gv| 2.0 * xv * gv),
                };
                vec![(*a, d)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut res = Vec::with_capacity(2);
                if ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt(g.data(), bv.data(), &mut da, m, n, k);
                    res.push((*a, Array::new(vec![m, k], da).expect("shape")));
                }
                if ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at(av.data(), g.data(), &mut db, k, m, n);
                    res.push((*b, Array::new(vec![k, n], db).expect("shape")));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("shape"))],
            Op::Conv1d { x, w, dilation } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, len) = (xv.rows(), xv.cols());
                let (cout, kernel) = (wv.shape()[0], wv.shape()[2]);
                let mut res = Vec::with_capacity(2);
                if ng(*w) {
                    let cols = im2col(xv.data(), cin, len, kernel, *dilation);
                    let mut dw = vec![0.0; cout * cin * kernel];
                    gemm_bt(g.data(), &cols, &mut dw, cout, len, cin * kernel);
                    res.push((*w, Array::new(wv.shape().to_vec(), dw).expect("shape")));
                }
                if ng(*x) {
                    let mut dcols = vec![0.0; cin * kernel * len];
                    gemm_at(wv.data(), g.data(), &mut dcols, cin * kernel, cout, len);
                    let dx = col2im(&dcols, cin, len, kernel, *dilation);
                    res.push((*x, Array::new(vec![cin, len], dx).expect("shape")));
                }
                res
            }
            Op::AddCol(x, v) => {
                let n = g.cols();
                let mut res = vec![(*x, g.clone())];
                if ng(*v) {
                    let dv = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                    res.push((*v, Array::new(val(*v).shape().to_vec(), dv).expect("shape")));
                }
                res
            }
            Op::Sum(a) => vec![(*a, Array::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let av = val(*a);
                vec![(*a, Array::full(av.shape(), g.item() / av.len() as f64))]
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut dx = Array::zeros(xv.shape());
                dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((yr, gr), dr) in out.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Array::new(out.shape().to_vec(), dx).expect("shape"))]
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = out.cols();
                let nf = n as f64;
                let mut dx = vec![0.0; out.len()];
                for (r, ((yr, gr), dr)) in out
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let gm = gr.iter().sum::<f64>() / nf;
                    let gy = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum::<f64>() / nf;
                    for j in 0..n {
                        dr[j] = inv_std[r] * (gr[j] - gm - yr[j] * gy);
                    }
                }
                vec![(*x, Array::new(out.shape().to_vec(), dx).expect("shape"))]
            }
            Op::GatherRows { table, idx } => {
                let tv = val(*table);
                let n = tv.cols();
                let mut dt = Array::zeros(tv.shape());
                let dd = dt.data_mut();
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        dd[src * n + j] += g.data()[r * n + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::RowMeans(x) => {
                let xv = val(*x);
                let n = xv.cols();
                let dx = Array::from_fn(xv.shape(), |idx| g.data()[idx / n] / n as f64);
                vec![(*x, dx)]
            }
        }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unfolds `x[cin×len]` into `[cin·kernel × len]` patches for same-padded convolution.
fn im2col(x: &[f64], cin: usize, len: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let half = (kernel / 2) as isize;
    let mut cols = vec![0.0; cin * kernel * len];
    for c in 0..cin {
        let xrow = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let shift = (k as isize - half) * dilation as isize;
            let dst = &mut cols[(c * kernel + k) * len..(c * kernel + k + 1) * len];
            for (l, d) in dst.iter_mut().enumerate() {
                let src = l as isize + shift;
                if src >= 0 && (src as usize) < len {
                    *d = xrow[src as usize];
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, len: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let half = (kernel / 2) as isize;
    let mut x = vec![0.0; cin * len];
    for c in 0..cin {
        for k in 0..kernel {
            let shift = (k as isize - half) * dilation as isize;
            let src = &cols[(c * kernel + k) * len..(c * kernel + k + 1) * len];
            for (l, &v) in src.iter().enumerate() {
                let xi = l as isize + shift;
                if xi >= 0 && (xi as usize) < len {
                    x[c * len + xi as usize] += v;
                }
            }
        }
    }
    x
}
