//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape by reference (no copy); [`Tape::backward`] replays the tape in
//! reverse and returns a [`Gradients`] table that can be folded into a
//! [`ParamStore`].

use crate::error::{Result, SitError};
use crate::kernels::{self, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Borrowed(&'p Tensor<T>),
    Owned(Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Exp(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Mean(Var),
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        logits: Var,
        log_p: Vec<T>,
        log_q: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    param_nodes: Vec<Option<Var>>,
    track_params: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters are treated as constants (frozen teacher,
    /// inference).
    pub fn frozen() -> Self {
        Tape {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter by reference. Repeated calls return the same node.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_nodes.get(id.index()) {
            return *v;
        }
        let tensor = store.get(id);
        let requires_grad = self.track_params && tensor.requires_grad();
        self.nodes.push(Node {
            value: Value::Borrowed(tensor),
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        if self.param_nodes.len() <= id.index() {
            self.param_nodes.resize(id.index() + 1, None);
        }
        self.param_nodes[id.index()] = Some(v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(SitError::shape(op, s, &[0, 0])),
        }
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(SitError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatRef::new(self.value(a).data(), ar, ac);
            let bv = MatRef::new(self.value(b).data(), br, bc);
            let av = if ta { av.t() } else { av };
            let bv = if tb { bv.t() } else { bv };
            kernels::gemm(T::one(), av, bv, T::zero(), MatMut::new(&mut out, m, n));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SitError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of a 2-D value.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row")?;
        if self.value(row).numel() != c {
            return Err(SitError::shape("add_row", self.shape(x), self.shape(row)));
        }
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(row).data();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::AddRow { x, row }, rg))
    }

    /// `x @ w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(SitError::shape("mul_scalar", self.shape(s), &[1]));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulScalar { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length C).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layernorm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(SitError::shape(
                "layernorm",
                self.shape(x),
                self.shape(gamma),
            ));
        }
        let (xhat, rstd) = kernels::layernorm_rows(self.value(x).data(), r, c, T::lit(1e-5));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention on a packed `[T, 3C]`
    /// query/key/value matrix. Returns the `[T, C]` head-concatenated output;
    /// the `[heads, T, T]` probabilities stay on the tape
    /// (see [`Tape::attention_probs`]).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (t, c3) = self.dims2(qkv, "attention")?;
        if c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(SitError::shape("attention", self.shape(qkv), &[heads]));
        }
        let c = c3 / 3;
        let d = c / heads;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * c];
        {
            let src = self.value(qkv).data();
            for h in 0..heads {
                let q = MatRef::strided(&src[h * d..], t, d, c3, 1);
                let k = MatRef::strided(&src[c + h * d..], t, d, c3, 1);
                let v = MatRef::strided(&src[2 * c + h * d..], t, d, c3, 1);
                let p = &mut probs[h * t * t..(h + 1) * t * t];
                kernels::gemm(scale, q, k.t(), T::zero(), MatMut::new(p, t, t));
                kernels::softmax_inplace(p, t, t, 1);
                kernels::gemm(
                    T::one(),
                    MatRef::new(p, t, t),
                    v,
                    T::zero(),
                    MatMut::strided(&mut out[h * d..], t, d, c, 1),
                );
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            Tensor::new(&[t, c], out)?,
            Op::Attention { qkv, heads, probs },
            rg,
        ))
    }

    /// Attention probabilities `[heads, T, T]` recorded by [`Tape::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                let t = self.shape(v)[0];
                Tensor::new(&[*heads, t, t], probs.clone()).ok()
            }
            _ => None,
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(SitError::Index {
                index: start + len,
                len: r,
            });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[len, c], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(SitError::shape(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.numel()).unwrap();
        let m = t.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = T::from_usize(ta.numel()).unwrap();
        let s: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg))
    }

    /// Softmax cross-entropy of each logit row against its label, averaged
    /// over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (r, k) = lt.dims2()?;
        if labels.len() != r {
            return Err(SitError::shape(
                "cross_entropy",
                lt.shape(),
                &[labels.len()],
            ));
        }
        let mut probs = lt.data().to_vec();
        kernels::softmax_inplace(&mut probs, r, k, 1);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(SitError::Index { index: y, len: k });
            }
            let row = lt.row(i);
            loss += kernels::log_sum_exp(row) - row[y];
        }
        let loss = loss / T::from_usize(r).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `KL(softmax(logits) ‖ softmax(target_logits))` averaged over rows. The
    /// target is a constant.
    pub fn kl_div(&mut self, logits: Var, target_logits: &Tensor<T>) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape() != target_logits.shape() {
            return Err(SitError::shape("kl_div", lt.shape(), target_logits.shape()));
        }
        let (r, _) = lt.dims2()?;
        let log_p = log_softmax_rows(lt)?;
        let log_q = log_softmax_rows(target_logits)?;
        let kl: T = log_p
            .iter()
            .zip(&log_q)
            .map(|(&lp, &lq)| lp.exp() * (lp - lq))
            .sum::<T>()
            / T::from_usize(r).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(kl),
            Op::KlDiv {
                logits,
                log_p,
                log_q,
            },
            rg,
        ))
    }

    /// `Σ w_i · x_i` over single-element values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(SitError::shape("weighted_sum", t.shape(), &[1]));
            }
            s += w * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(SitError::shape("backward", lv.shape(), &[1]));
        }
        if !lv.all_finite() {
            return Err(SitError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, i));
                    grads[i] = Some(g);
                    continue;
                }
                op => self.backprop(op, i, &g, &mut grads),
            }
        }
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    fn backprop(&self, op: &Op<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = self.nodes[out].value.get();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (br, bc) = (self.shape(*b)[0], self.shape(*b)[1]);
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let gv = MatRef::new(g, m, n);
                let av = MatRef::new(self.value(*a).data(), ar, ac);
                let bv = MatRef::new(self.value(*b).data(), br, bc);
                let opa = if *ta { av.t() } else { av };
                let opb = if *tb { bv.t() } else { bv };
                if let Some(da) = self.acc(grads, *a) {
                    let dst = MatMut::new(da, ar, ac);
                    if *ta {
                        kernels::gemm(T::one(), opb, gv.t(), T::one(), dst);
                    } else {
                        kernels::gemm(T::one(), gv, opb.t(), T::one(), dst);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let dst = MatMut::new(db, br, bc);
                    if *tb {
                        kernels::gemm(T::one(), gv.t(), opa, T::one(), dst);
                    } else {
                        kernels::gemm(T::one(), opa.t(), gv, T::one(), dst);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(dr) = self.acc(grads, *row) {
                    let c = dr.len();
                    for chunk in g.chunks(c) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * sv);
                }
                let xv = self.value(*x).data();
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor);
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut()
                        .zip(g.iter().zip(y.data()))
                        .for_each(|(d, (&gv, &yv))| *d += gv * yv);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (&gv, &v))| *d += gv * kernels::gelu_grad(v));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(y.shape(), *axis);
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::softmax_backward(y.data(), g, dx, outer, len, inner);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                if let Some(dg) = self.acc(grads, *gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for chunk in g.chunks(c) {
                        add_into(db, chunk);
                    }
                }
                let gam = self.value(*gamma).data();
                if let Some(dx) = self.acc(grads, *x) {
                    let nc = T::from_usize(c).unwrap();
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xr[j];
                        }
                        m1 = m1 / nc;
                        m2 = m2 / nc;
                        for j in 0..c {
                            dx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let (t, c) = (y.shape()[0], y.shape()[1]);
                let c3 = 3 * c;
                let d = c / heads;
                let scale = T::one() / T::from_usize(d).unwrap().sqrt();
                let src = self.value(*qkv).data();
                let Some(dqkv) = self.acc(grads, *qkv) else {
                    return;
                };
                let mut dp = vec![T::zero(); t * t];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    let pv = MatRef::new(p, t, t);
                    let q = MatRef::strided(&src[h * d..], t, d, c3, 1);
                    let k = MatRef::strided(&src[c + h * d..], t, d, c3, 1);
                    let v = MatRef::strided(&src[2 * c + h * d..], t, d, c3, 1);
                    let go = MatRef::strided(&g[h * d..], t, d, c, 1);
                    // dP = dO · Vᵀ
                    kernels::gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, t, t));
                    // dV += Pᵀ · dO
                    kernels::gemm(
                        T::one(),
                        pv.t(),
                        go,
                        T::one(),
                        MatMut::strided(&mut dqkv[2 * c + h * d..], t, d, c3, 1),
                    );
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), stored in dp
                    let mut ds = vec![T::zero(); t * t];
                    kernels::softmax_backward(p, &dp, &mut ds, t, t, 1);
                    let dsv = MatRef::new(&ds, t, t);
                    kernels::gemm(
                        scale,
                        dsv,
                        k,
                        T::one(),
                        MatMut::strided(&mut dqkv[h * d..], t, d, c3, 1),
                    );
                    kernels::gemm(
                        scale,
                        dsv.t(),
                        q,
                        T::one(),
                        MatMut::strided(&mut dqkv[c + h * d..], t, d, c3, 1),
                    );
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.shape()[1];
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(&mut dx[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.acc(grads, p) {
                        add_into(dp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                let v = g[0] / n;
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let f = T::lit(2.0) * g[0] / T::from_usize(av.len()).unwrap();
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &z) in da.iter_mut().zip(av).zip(bv) {
                        *d += f * (x - z);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &x), &z) in db.iter_mut().zip(av).zip(bv) {
                        *d -= f * (x - z);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let f = g[0] / T::from_usize(labels.len()).unwrap();
                if let Some(dz) = self.acc(grads, *logits) {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == lab { T::one() } else { T::zero() };
                            dz[i * k + j] += f * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv {
                logits,
                log_p,
                log_q,
            } => {
                let (r, k) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let f = g[0] / T::from_usize(r).unwrap();
                if let Some(dz) = self.acc(grads, *logits) {
                    for i in 0..r {
                        let lp = &log_p[i * k..(i + 1) * k];
                        let lq = &log_q[i * k..(i + 1) * k];
                        let mean: T = lp.iter().zip(lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                        for j in 0..k {
                            dz[i * k + j] += f * lp[j].exp() * ((lp[j] - lq[j]) - mean);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(dv) = self.acc(grads, v) {
                        dv[0] += w * g[0];
                    }
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Row-wise log-softmax of a 2-D (or 1-D) tensor.
pub fn log_softmax_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<T>> {
    let (r, k) = t.dims2()?;
    let mut out = Vec::with_capacity(r * k);
    for i in 0..r {
        let row = &t.data()[i * k..(i + 1) * k];
        let lse = kernels::log_sum_exp(row);
        out.extend(row.iter().map(|&v| v - lse));
    }
    Ok(out)
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g);
        }
    }
}
