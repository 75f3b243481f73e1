//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value; `backward` walks the
//! nodes in reverse and accumulates gradients into the inputs that need them.
//! Tensors are treated as matrices whose row count is the product of all
//! leading dimensions.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `allowed[q * cols + k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), rows * cols, "mask size");
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask::new(rows, cols, vec![true; rows * cols])
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gather(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Tape<'a, T: Real> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    params: BTreeMap<String, Var>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter in the bound store, zero when unreachable.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter of the store; repeated calls share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let t = store.get(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || tb.shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            out.data_mut(),
            n as isize,
            1,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Concatenates along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(shape_err("concat", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = T::c(1e-5);
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let cf = T::from_usize(c).unwrap();
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, &v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(idx, &h)| h * g[idx % c] + b[idx % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Selects rows of `table` (embedding lookup / gather).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), ng))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Nq×d`, `k`/`v` are `Nk×d`; `mask[q][k] == false` blocks the pair.
    /// A query row with no allowed key produces zeros.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Arc<Mask>>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (tq.rows(), tq.cols());
        let nk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != nk || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "masked_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}",
                    tq.shape(),
                    tk.shape(),
                    tv.shape()
                ),
            ));
        }
        if let Some(m) = mask {
            if m.rows != nq || m.cols != nk {
                return Err(shape_err(
                    "masked_attention",
                    format!("mask {}x{} for {nq}x{nk} scores", m.rows, m.cols),
                ));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = Tensor::zeros(&[nq, d]);
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            // scores = Qh · Khᵀ
            T::gemm(
                nq,
                dh,
                nk,
                &tq.data()[h * dh..],
                d as isize,
                1,
                &tk.data()[h * dh..],
                1,
                d as isize,
                p,
                nk as isize,
                1,
                false,
            );
            for r in 0..nq {
                let row = &mut p[r * nk..(r + 1) * nk];
                let mut max = T::neg_infinity();
                for (c, s) in row.iter_mut().enumerate() {
                    let ok = mask.map_or(true, |m| m.get(r, c));
                    if ok {
                        *s = *s * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                }
                if max == T::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for (c, s) in row.iter_mut().enumerate() {
                    if mask.map_or(true, |m| m.get(r, c)) {
                        *s = (*s - max).exp();
                        sum += *s;
                    } else {
                        *s = T::zero();
                    }
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            // out_h = P · Vh
            T::gemm(
                nq,
                nk,
                dh,
                p,
                nk as isize,
                1,
                &tv.data()[h * dh..],
                d as isize,
                1,
                &mut out.data_mut()[h * dh..],
                d as isize,
                1,
                false,
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over rows of `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, c) = (tl.rows(), tl.cols());
        if targets.len() != rows || targets.iter().any(|&t| t >= c) {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, {} targets", tl.shape(), targets.len()),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[targets[r]];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        if rows > 0 {
            loss /= T::from_usize(rows).unwrap();
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Swaps the two dimensions of a matrix.
    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Dense layer `x·W + b`.
    pub fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        if let Some(store) = self.store {
            for (name, p) in store.iter() {
                let g = self
                    .params
                    .get(name)
                    .and_then(|v| grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                params.insert(name.to_string(), g);
            }
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |ga| {
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        ga.data_mut(),
                        k as isize,
                        1,
                        true,
                    )
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |gb| {
                    T::gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        gb.data_mut(),
                        n as isize,
                        1,
                        true,
                    )
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| {
                    let c = g.cols();
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for (j, &x) in g.row(r).iter().enumerate() {
                            gbd[j % c] += x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += x * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += x * *s;
                    }
                });
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + c];
                            for (o, &x) in gp.row_mut(r).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Relu(a) => {
                let out = self.value(Var(idx));
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if y > T::zero() {
                            *o += x;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let rows = g.rows();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    let d = gg.data_mut();
                    for (i, (&gi, &h)) in g.data().iter().zip(xhat).enumerate() {
                        d[i % c] += gi * h;
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    let d = gb.data_mut();
                    for (i, &gi) in g.data().iter().enumerate() {
                        d[i % c] += gi;
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let cf = T::from_usize(c).unwrap();
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            out[j] += rstd[r] * (dh - sum_dh / cf - hr[j] * sum_dh_h / cf);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.value(Var(idx));
                self.accumulate(grads, *a, |ga| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                });
            }
            Op::Gather(table, ids) => {
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                if rows == 0 {
                    return;
                }
                let c = probs.len() / rows;
                let scale = g.item() / T::from_usize(rows).unwrap();
                self.accumulate(grads, *logits, |gl| {
                    let d = gl.data_mut();
                    for r in 0..rows {
                        for j in 0..c {
                            let mut p = probs[r * c + j];
                            if j == targets[r] {
                                p -= T::one();
                            }
                            d[r * c + j] += p * scale;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose2();
                self.accumulate(grads, *a, |ga| ga.add_assign(&gt));
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|o| *o += s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (tq.rows(), tq.cols());
        let nk = tk.rows();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut dq = Tensor::zeros(&[nq, d]);
        let mut dk = Tensor::zeros(&[nk, d]);
        let mut dv = Tensor::zeros(&[nk, d]);
        let mut dp = vec![T::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dVh = Pᵀ · dOh
            T::gemm(
                nk,
                nq,
                dh,
                p,
                1,
                nk as isize,
                &g.data()[h * dh..],
                d as isize,
                1,
                &mut dv.data_mut()[h * dh..],
                d as isize,
                1,
                false,
            );
            // dP = dOh · Vhᵀ
            T::gemm(
                nq,
                dh,
                nk,
                &g.data()[h * dh..],
                d as isize,
                1,
                &tv.data()[h * dh..],
                1,
                d as isize,
                &mut dp,
                nk as isize,
                1,
                false,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
            for r in 0..nq {
                let pr = &p[r * nk..(r + 1) * nk];
                let dr = &mut dp[r * nk..(r + 1) * nk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            // dQh = dS · Kh
            T::gemm(
                nq,
                nk,
                dh,
                &dp,
                nk as isize,
                1,
                &tk.data()[h * dh..],
                d as isize,
                1,
                &mut dq.data_mut()[h * dh..],
                d as isize,
                1,
                false,
            );
            // dKh = dSᵀ · Qh
            T::gemm(
                nk,
                nq,
                dh,
                &dp,
                1,
                nk as isize,
                &tq.data()[h * dh..],
                d as isize,
                1,
                &mut dk.data_mut()[h * dh..],
                d as isize,
                1,
                false,
            );
        }
        self.accumulate(grads, q, |t| t.add_assign(&dq));
        self.accumulate(grads, k, |t| t.add_assign(&dk));
        self.accumulate(grads, v, |t| t.add_assign(&dv));
    }
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[&[0.0, 0.0]]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::eye(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", t(&[&[1.0, -2.0], &[0.5, 3.0]]));
        store.insert("unused", t(&[&[1.0]]));
        let mut tape = Tape::with_params(&store);
        let w = tape.param("w").unwrap();
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params()["w"].data(), &[1.0; 4]);
        assert_eq!(grads.params()["unused"].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
        let err = tape.masked_attention(a, b, b, None, 1).unwrap_err().to_string();
        assert!(err.starts_with("masked_attention"), "{err}");
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_n() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[3, 5]));
        let l = tape.cross_entropy(x, &[0, 4, 2]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_query_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let kv = tape.input(t(&[&[2.0, 1.0], &[1.0, 3.0]]));
        let mask = Arc::new(Mask::new(2, 2, vec![true, false, false, false]));
        let y = tape.masked_attention(q, kv, kv, Some(&mask), 2).unwrap();
        assert_eq!(tape.value(y).row(0), &[2.0, 1.0]);
        assert_eq!(tape.value(y).row(1), &[0.0, 0.0]);
    }
}
