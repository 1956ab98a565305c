use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Which key positions each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Lower-triangular mask: row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self { n, allowed }
    }

    /// Causal within each consecutive segment, nothing across segments.
    pub fn block_causal(segments: &[usize]) -> Self {
        let n: usize = segments.iter().sum();
        let mut allowed = vec![false; n * n];
        let mut start = 0;
        for &len in segments {
            for i in start..start + len {
                for j in start..=i {
                    allowed[i * n + j] = true;
                }
            }
            start += len;
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Sum(usize),
    Reshape(usize),
    GatherSum(usize, Rc<Vec<Vec<usize>>>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gelu(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::GatherSum(..) => "gather_sum",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for a single forward/backward pass.
///
/// Shape errors inside tape operations are programming errors and panic;
/// callers validate user-facing shapes before recording. Non-finite values
/// do not panic: the first offending op is remembered and reported by
/// [`Tape::check_finite`].
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    sg_replay: Option<Vec<Tensor<T>>>,
    sg_cursor: Cell<usize>,
    sg_values: RefCell<Vec<Tensor<T>>>,
    poison: RefCell<Option<String>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter name to tape variable map produced by [`Tape::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unbound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients of one backward pass, indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            sg_replay: None,
            sg_cursor: Cell::new(0),
            sg_values: RefCell::new(Vec::new()),
            poison: RefCell::new(None),
        }
    }

    /// A tape whose `stop_gradient` calls return the given values, in call
    /// order, instead of their inputs. Finite differences use this to hold
    /// stop-gradient outputs at their unperturbed values.
    pub fn with_sg_replay(values: Vec<Tensor<T>>) -> Self {
        let mut t = Self::new();
        t.sg_replay = Some(values);
        t
    }

    /// Values produced by `stop_gradient`, in call order.
    pub fn sg_values(&self) -> Vec<Tensor<T>> {
        self.sg_values.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if !value.is_finite() {
            let mut p = self.poison.borrow_mut();
            if p.is_none() {
                *p = Some(op.name().to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Errors if any recorded value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.poison.borrow().as_ref() {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records every parameter as a leaf, in name order.
    pub fn bind(&self, params: &ParamSet<T>) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, p)| (name.clone(), self.leaf(p.values().clone(), p.requires_grad())))
            .collect();
        Bindings { vars }
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn binary(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "add", |p, q| p + q);
        self.push(v, Op::Add(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "sub", |p, q| p - q);
        self.push(v, Op::Sub(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "mul", |p, q| p * q);
        self.push(v, Op::Mul(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    /// Adds a length-`m` vector to every row of an `n × m` array.
    pub fn add_row(&self, x: Var, bias: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let m = xv.cols();
            assert_eq!(bv.len(), m, "add_row: bias length");
            let mut out = xv.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o = *o + b;
                }
            }
            out
        };
        self.push(v, Op::AddRow(x.0, bias.0), self.needs(&[x.0, bias.0]))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&p| p * c).collect()).unwrap()
        };
        self.push(v, Op::Scale(x.0, c), self.needs(&[x.0]))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `a[n,k] · b[k,m]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, k, m) = (x.rows(), x.cols(), y.cols());
            assert_eq!(y.rows(), k, "matmul: {:?} x {:?}", x.shape(), y.shape());
            let mut out = vec![T::zero(); n * m];
            gemm_nn(x.data(), y.data(), &mut out, n, k, m);
            Tensor::new(vec![n, m], out).unwrap()
        };
        self.push(v, Op::MatMul(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    /// `a[n,k] · b[m,k]ᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, k, m) = (x.rows(), x.cols(), y.rows());
            assert_eq!(y.cols(), k, "matmul_t: {:?} x {:?}ᵀ", x.shape(), y.shape());
            let mut out = vec![T::zero(); n * m];
            gemm_nt(x.data(), y.data(), &mut out, n, k, m);
            Tensor::new(vec![n, m], out).unwrap()
        };
        self.push(v, Op::MatMulT(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.transpose();
        self.push(v, Op::Transpose(x.0), self.needs(&[x.0]))
    }

    /// Sum of all entries, as a scalar (shape `[]`).
    pub fn sum(&self, x: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let s = nodes[x.0].value.data().iter().fold(T::zero(), |a, &b| a + b);
            Tensor::scalar(s)
        };
        self.push(v, Op::Sum(x.0), self.needs(&[x.0]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.nodes.borrow()[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes.borrow()[x.0].value.clone().reshape(shape).expect("reshape");
        self.push(v, Op::Reshape(x.0), self.needs(&[x.0]))
    }

    /// Row `g` of the output is the sum of the source rows listed in `groups[g]`.
    /// With singleton groups this is an embedding lookup.
    pub fn gather_sum(&self, src: Var, groups: Vec<Vec<usize>>) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let s = &nodes[src.0].value;
            let (rows, m) = (s.rows(), s.cols());
            let mut out = vec![T::zero(); groups.len() * m];
            for (g, group) in groups.iter().enumerate() {
                let orow = &mut out[g * m..(g + 1) * m];
                for &r in group {
                    assert!(r < rows, "gather_sum: row {r} out of range {rows}");
                    for (o, &x) in orow.iter_mut().zip(s.row(r)) {
                        *o = *o + x;
                    }
                }
            }
            Tensor::new(vec![groups.len(), m], out).unwrap()
        };
        self.push(v, Op::GatherSum(src.0, Rc::new(groups)), self.needs(&[src.0]))
    }

    pub fn gather_rows(&self, src: Var, rows: &[usize]) -> Var {
        self.gather_sum(src, rows.iter().map(|&r| vec![r]).collect())
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert!(start + len <= xv.cols(), "slice_cols out of range");
            let data = (0..xv.rows())
                .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![xv.rows(), len], data).unwrap()
        };
        self.push(v, Op::SliceCols(x.0, start), self.needs(&[x.0]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].0].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for p in parts {
                    let pv = &nodes[p.0].value;
                    assert_eq!(pv.rows(), n, "concat_cols: row mismatch");
                    data.extend_from_slice(pv.row(r));
                }
            }
            Tensor::new(vec![n, total], data).unwrap()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        self.push(v, Op::ConcatCols(ids), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                assert_eq!(pv.cols(), m, "concat_rows: column mismatch");
                data.extend_from_slice(pv.data());
                rows += pv.rows();
            }
            Tensor::new(vec![rows, m], data).unwrap()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        self.push(v, Op::ConcatRows(ids), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&p| gelu(p)).collect()).unwrap()
        };
        self.push(v, Op::Gelu(x.0), self.needs(&[x.0]))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|p| p.tanh()).collect()).unwrap()
        };
        self.push(v, Op::Tanh(x.0), self.needs(&[x.0]))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Var {
        let (v, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let m = xv.cols();
            assert!(gv.len() == m && bv.len() == m, "layer_norm: parameter length");
            let mut out = xv.clone();
            let mut xhat = vec![T::zero(); xv.len()];
            let mut rstd = vec![T::zero(); xv.rows()];
            let inv_m = T::one() / T::c(m as f64);
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let mu = row.iter().fold(T::zero(), |a, &b| a + b) * inv_m;
                let var = row.iter().fold(T::zero(), |a, &b| a + (b - mu) * (b - mu)) * inv_m;
                let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
                rstd[r] = rs;
                let orow = out.row_mut(r);
                for j in 0..m {
                    let h = (row[j] - mu) * rs;
                    xhat[r * m + j] = h;
                    orow[j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (out, xhat, rstd)
        };
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row-wise softmax over allowed entries; disallowed entries are exactly 0.
    pub fn masked_softmax(&self, x: Var, mask: Rc<AttnMask>) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, m) = (xv.rows(), xv.cols());
            assert!(mask.len() == n && n == m, "masked_softmax: mask {} vs {:?}", mask.len(), xv.shape());
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                let row = xv.row(i);
                let mut mx = T::neg_infinity();
                for j in 0..m {
                    if mask.allowed(i, j) {
                        mx = mx.max(row[j]);
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut s = T::zero();
                for j in 0..m {
                    if mask.allowed(i, j) {
                        let e = (row[j] - mx).exp();
                        out[i * m + j] = e;
                        s = s + e;
                    }
                }
                for j in 0..m {
                    out[i * m + j] = out[i * m + j] / s;
                }
            }
            Tensor::new(vec![n, m], out).unwrap()
        };
        self.push(v, Op::MaskedSoftmax(x.0), self.needs(&[x.0]))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a scalar.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let (v, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            let (n, vocab) = (lv.rows(), lv.cols());
            assert!(targets.len() == n && weights.len() == n, "cross_entropy: row count");
            let mut probs = vec![T::zero(); n * vocab];
            let mut total = T::zero();
            for i in 0..n {
                let row = lv.row(i);
                assert!(targets[i] < vocab, "cross_entropy: target out of range");
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = T::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    probs[i * vocab + j] = e;
                    s = s + e;
                }
                for p in &mut probs[i * vocab..(i + 1) * vocab] {
                    *p = *p / s;
                }
                if weights[i] != T::zero() {
                    let lse = mx + s.ln();
                    total = total + weights[i] * (lse - row[targets[i]]);
                }
            }
            (Tensor::scalar(total), probs)
        };
        let ng = self.needs(&[logits.0]);
        self.push(
            v,
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        )
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let v = match &self.sg_replay {
            Some(replay) => {
                let k = self.sg_cursor.get();
                self.sg_cursor.set(k + 1);
                let r = replay
                    .get(k)
                    .expect("stop_gradient replay exhausted: expression structure changed")
                    .clone();
                assert_eq!(r.shape(), self.nodes.borrow()[x.0].value.shape(), "sg replay shape");
                r
            }
            None => self.nodes.borrow()[x.0].value.clone(),
        };
        self.sg_values.borrow_mut().push(v.clone());
        self.push(v, Op::Leaf, false)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn gelu<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::c(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(slot.data_mut());
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y));
            acc(grads, nodes, *b, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y));
            acc(grads, nodes, *b, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x - y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + gd[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + gd[i] * av[i];
                }
            });
        }
        Op::AddRow(x, b) => {
            acc(grads, nodes, *x, |d| d.iter_mut().zip(gd).for_each(|(p, &q)| *p = *p + q));
            let m = nodes[*b].value.len();
            acc(grads, nodes, *b, |d| {
                for r in 0..gd.len() / m {
                    for j in 0..m {
                        d[j] = d[j] + gd[r * m + j];
                    }
                }
            });
        }
        Op::Scale(x, c) => {
            acc(grads, nodes, *x, |d| d.iter_mut().zip(gd).for_each(|(p, &q)| *p = *p + *c * q));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            acc(grads, nodes, *a, |d| gemm_nt(gd, bv.data(), d, n, m, k));
            acc(grads, nodes, *b, |d| gemm_tn(av.data(), gd, d, n, k, m));
        }
        Op::MatMulT(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (av.rows(), av.cols(), bv.rows());
            acc(grads, nodes, *a, |d| gemm_nn(gd, bv.data(), d, n, m, k));
            acc(grads, nodes, *b, |d| gemm_tn(gd, av.data(), d, n, m, k));
        }
        Op::Transpose(x) => {
            let gt = g.transpose();
            acc(grads, nodes, *x, |d| d.iter_mut().zip(gt.data()).for_each(|(p, &q)| *p = *p + q));
        }
        Op::Sum(x) => {
            let s = gd[0];
            acc(grads, nodes, *x, |d| d.iter_mut().for_each(|p| *p = *p + s));
        }
        Op::Reshape(x) => {
            acc(grads, nodes, *x, |d| d.iter_mut().zip(gd).for_each(|(p, &q)| *p = *p + q));
        }
        Op::GatherSum(src, groups) => {
            let m = nodes[*src].value.cols();
            acc(grads, nodes, *src, |d| {
                for (gi, group) in groups.iter().enumerate() {
                    let grow = &gd[gi * m..(gi + 1) * m];
                    for &r in group {
                        for (p, &q) in d[r * m..(r + 1) * m].iter_mut().zip(grow) {
                            *p = *p + q;
                        }
                    }
                }
            });
        }
        Op::SliceCols(x, start) => {
            let cols = nodes[*x].value.cols();
            let len = g.cols();
            acc(grads, nodes, *x, |d| {
                for r in 0..g.rows() {
                    for j in 0..len {
                        d[r * cols + start + j] = d[r * cols + start + j] + gd[r * len + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                acc(grads, nodes, p, |d| {
                    for r in 0..g.rows() {
                        for j in 0..pc {
                            d[r * pc + j] = d[r * pc + j] + gd[r * total + off + j];
                        }
                    }
                });
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc(grads, nodes, p, |d| {
                    for j in 0..n {
                        d[j] = d[j] + gd[off + j];
                    }
                });
                off += n;
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            acc(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + gd[i] * gelu_grad(xv[i]);
                }
            });
        }
        Op::Tanh(x) => {
            let yv = nodes[id].value.data();
            acc(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + gd[i] * (T::one() - yv[i] * yv[i]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = nodes[*gain].value.data();
            let m = gv.len();
            let n = rstd.len();
            acc(grads, nodes, *gain, |d| {
                for r in 0..n {
                    for j in 0..m {
                        d[j] = d[j] + gd[r * m + j] * xhat[r * m + j];
                    }
                }
            });
            acc(grads, nodes, *bias, |d| {
                for r in 0..n {
                    for j in 0..m {
                        d[j] = d[j] + gd[r * m + j];
                    }
                }
            });
            acc(grads, nodes, *x, |d| {
                let inv_m = T::one() / T::c(m as f64);
                let mut dxhat = vec![T::zero(); m];
                for r in 0..n {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..m {
                        dxhat[j] = gd[r * m + j] * gv[j];
                        mean_d = mean_d + dxhat[j];
                        mean_dx = mean_dx + dxhat[j] * xhat[r * m + j];
                    }
                    mean_d = mean_d * inv_m;
                    mean_dx = mean_dx * inv_m;
                    for j in 0..m {
                        d[r * m + j] = d[r * m + j]
                            + rstd[r] * (dxhat[j] - mean_d - xhat[r * m + j] * mean_dx);
                    }
                }
            });
        }
        Op::MaskedSoftmax(x) => {
            let y = &nodes[id].value;
            let m = y.cols();
            acc(grads, nodes, *x, |d| {
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * m..(i + 1) * m];
                    let s = dot(yr, gr);
                    for j in 0..m {
                        d[i * m + j] = d[i * m + j] + yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            weights,
        } => {
            let vocab = nodes[*logits].value.cols();
            let g0 = gd[0];
            acc(grads, nodes, *logits, |d| {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let s = g0 * w;
                    for j in 0..vocab {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        d[i * vocab + j] = d[i * vocab + j] + s * (probs[i * vocab + j] - onehot);
                    }
                }
            });
        }
    }
}
