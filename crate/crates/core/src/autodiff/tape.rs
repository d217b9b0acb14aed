use crate::autodiff::tensor::{broadcast_offsets, broadcast_shape, strides, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Broadcast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Embedding(Var, Vec<usize>),
    EmbeddingBag(Var, Vec<Vec<usize>>, bool),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Select(Vec<bool>, Var, Var),
    Minimum(Var, Var),
    Clamp(Var, T, T),
    Pick(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Bmm(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Minimum(a, b) => {
                vec![*a, *b]
            }
            Select(_, a, b) => vec![*a, *b],
            Permute(a, _) | Reshape(a) | Broadcast(a) | Neg(a) | Scale(a, _) | AddScalar(a)
            | Exp(a) | Log(a) | Tanh(a) | Sigmoid(a) | Softmax(a) | LogSoftmax(a)
            | Slice(a, _, _) | Embedding(a, _) | EmbeddingBag(a, _, _) | SumAll(a)
            | MeanAll(a) | SumAxis(a, _) | Clamp(a, _, _) | Pick(a, _) => vec![*a],
            Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    param: Option<ParamId>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Operations evaluate eagerly; the tape keeps each result together with the
/// rule needed to pull gradients back to its inputs. Parameters are borrowed
/// from a [`ParamStore`] without copying.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, indexed by [`ParamId`].
    pub fn into_param_grads(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<T: Scalar> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<'static, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            trainable: Vec::new(),
        }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape reading parameters from `store`; none of them require gradients.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Some(store),
            param_vars: vec![None; store.len()],
            trainable: vec![false; store.len()],
        }
    }

    /// Tape where exactly the parameters flagged in `trainable` receive gradients.
    pub fn with_trainable(store: &'p ParamStore<T>, trainable: &[bool]) -> Self {
        assert_eq!(trainable.len(), store.len());
        let mut tape = Self::with_params(store);
        tape.trainable = trainable.to_vec();
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(pid)) => self.params.expect("param tape").value(pid),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on non-scalar");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter, created once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            requires_grad: self.trainable[id.index()],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a [.., p] · b [p, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let p = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / p;
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, p, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b)))
    }

    /// Batched product `[B, m, p] · [B, p, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (batch, m, p, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &da[i * m * p..(i + 1) * m * p],
                    &db[i * p * n..(i + 1) * p * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    p,
                    n,
                );
            }
        }
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], out), Op::Bmm(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", &sa, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let offs = permute_offsets(&sa, axes);
        let src = self.value(a).data();
        let out: Vec<T> = offs.iter().map(|&o| src[o]).collect();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute(a, axes.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::dim("broadcast_to", &sa, shape)),
        }
        let offs = broadcast_offsets(&sa, shape);
        let src = self.value(a).data();
        let out = offs.iter().map(|&o| src[o]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(a)))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| Error::dim(name, ta.shape(), tb.shape()))?;
            let oa = broadcast_offsets(ta.shape(), &shape);
            let ob = broadcast_offsets(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum of equally shaped inputs; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("minimum", self.shape(a), self.shape(b)));
        }
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Chooses `a` where `mask` is set and `b` elsewhere, copying values bit for bit.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.len() {
            return Err(Error::dim("select", ta.shape(), tb.shape()));
        }
        let data = mask
            .iter()
            .zip(ta.data().iter().zip(tb.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Select(mask.to_vec(), a, b)))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row softmax on a 2-D input.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim("softmax_rows", self.shape(a), &[]));
        }
        self.softmax(a)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::Numeric {
                op: "log_softmax",
                detail: "non-finite input".into(),
            });
        }
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::dim("slice", &sa, &[axis, start, len]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice(a, axis, start)))
    }

    /// Row gather from a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::dim("embedding", &st, &[ids.len()]));
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Vocabulary { id, size: st[0] });
        }
        let d = st[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding(table, ids.to_vec()),
        ))
    }

    /// One output row per bag: the sum (or mean) of the gathered table rows.
    ///
    /// Equivalent to multiplying a multi-hot row by the table.
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>], mean: bool) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || bags.is_empty() {
            return Err(Error::dim("embedding_bag", &st, &[bags.len()]));
        }
        let d = st[1];
        let src = self.value(table).data();
        let mut out = vec![T::zero(); bags.len() * d];
        for (b, ids) in bags.iter().enumerate() {
            if mean && ids.is_empty() {
                return Err(Error::Contract("empty bag in mean pooling".into()));
            }
            let row = &mut out[b * d..(b + 1) * d];
            for &i in ids {
                if i >= st[0] {
                    return Err(Error::Vocabulary { id: i, size: st[0] });
                }
                for (o, &x) in row.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *o += x;
                }
            }
            if mean {
                let inv = T::one() / T::lit(ids.len() as f64);
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bags.len(), d], out),
            Op::EmbeddingBag(table, bags.to_vec(), mean),
        ))
    }

    /// Gathers `a[i, idx[i]]` from a `[n, c]` input.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != idx.len() || idx.iter().any(|&i| i >= sa[1]) {
            return Err(Error::dim("pick", &sa, &[idx.len()]));
        }
        let src = self.value(a).data();
        let out = idx.iter().enumerate().map(|(r, &c)| src[r * sa[1] + c]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::Pick(a, idx.to_vec()),
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Sums out `axis`; the axis is dropped from the shape (rank-1 results stay `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::dim("sum_axis", &sa, &[axis]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let n = sa[axis];
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, axis)))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<Option<Tensor<T>>> = vec![None; self.param_vars.len()];
        let mut nodes: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let t = match g {
                Some(g) if node.requires_grad => {
                    Some(Tensor::from_parts(self.value(Var(i)).shape().to_vec(), g))
                }
                _ => None,
            };
            if let (Some(pid), Some(t)) = (node.param, &t) {
                params[pid.index()] = Some(t.clone());
            }
            nodes.push(t);
        }
        Ok(Gradients { nodes, params })
    }

    fn backprop_node(&self, out: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[out.0];
        let y = self.value(out);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / p;
                if let Some(ga) = self.slot(*a, grads) {
                    gemm_nt(g, tb.data(), ga, m, n, p);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gemm_tn(ta.data(), g, gb, m, p, n);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, p) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * p * n..(i + 1) * p * n],
                            &mut ga[i * m * p..(i + 1) * m * p],
                            m,
                            n,
                            p,
                        );
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for i in 0..batch {
                        gemm_tn(
                            &ta.data()[i * m * p..(i + 1) * m * p],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * p * n..(i + 1) * p * n],
                            m,
                            p,
                            n,
                        );
                    }
                }
            }
            Op::Permute(a, axes) => {
                let sa = self.value(*a).shape().to_vec();
                if let Some(ga) = self.slot(*a, grads) {
                    for (gi, o) in g.iter().zip(permute_offsets(&sa, axes)) {
                        ga[o] += *gi;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
            }
            Op::Broadcast(a) => {
                let sa = self.value(*a).shape().to_vec();
                if let Some(ga) = self.slot(*a, grads) {
                    reduce_into(ga, g, &sa, y.shape());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if let Some(ga) = self.slot(*a, grads) {
                    reduce_into(ga, g, &sa, y.shape());
                }
                if let Some(gb) = self.slot(*b, grads) {
                    if sign < T::zero() {
                        let ng: Vec<T> = g.iter().map(|&x| -x).collect();
                        reduce_into(gb, &ng, &sb, y.shape());
                    } else {
                        reduce_into(gb, g, &sb, y.shape());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out_shape = y.shape();
                let oa = broadcast_offsets(ta.shape(), out_shape);
                let ob = broadcast_offsets(tb.shape(), out_shape);
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..g.len() {
                        ga[oa[i]] += g[i] * tb.data()[ob[i]];
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for i in 0..g.len() {
                        gb[ob[i]] += g[i] * ta.data()[oa[i]];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_b: Vec<bool> =
                    ta.data().iter().zip(tb.data()).map(|(x, y)| y < x).collect();
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..g.len() {
                        if !pick_b[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for i in 0..g.len() {
                        if pick_b[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::Select(mask, a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..g.len() {
                        if mask[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for i in 0..g.len() {
                        if !mask[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x -= d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
            }
            Op::Exp(a) => self.unary_back(*a, g, grads, |_, y| y, y),
            Op::Log(a) => self.unary_back(*a, g, grads, |x, _| T::one() / x, y),
            Op::Tanh(a) => self.unary_back(*a, g, grads, |_, y| T::one() - y * y, y),
            Op::Sigmoid(a) => self.unary_back(*a, g, grads, |_, y| y * (T::one() - y), y),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_back(
                    *a,
                    g,
                    grads,
                    |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
                    y,
                )
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = *y.shape().last().unwrap();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..n {
                            out[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let shape = y.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[axis] * inner;
                    if let Some(gp) = self.slot(*p, grads) {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice(a, axis, start) => {
                let sa = self.shape(*a).to_vec();
                let (axis, start) = (*axis, *start);
                let len = y.shape()[axis];
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                if let Some(ga) = self.slot(*a, grads) {
                    for o in 0..outer {
                        let base = (o * sa[axis] + start) * inner;
                        add_into(
                            &mut ga[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(*table, grads) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::EmbeddingBag(table, bags, mean) => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(*table, grads) {
                    for (b, ids) in bags.iter().enumerate() {
                        let scale = if *mean {
                            T::one() / T::lit(ids.len() as f64)
                        } else {
                            T::one()
                        };
                        let gr = &g[b * d..(b + 1) * d];
                        for &i in ids {
                            for (o, &x) in gt[i * d..(i + 1) * d].iter_mut().zip(gr) {
                                *o += x * scale;
                            }
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = self.slot(*a, grads) {
                    for (r, &i) in idx.iter().enumerate() {
                        ga[r * c + i] += g[r];
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let s = g[0] / T::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumAxis(a, axis) => {
                let sa = self.shape(*a).to_vec();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let n = sa[*axis];
                if let Some(ga) = self.slot(*a, grads) {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            add_into(&mut ga[base..base + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        a: Var,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        d: impl Fn(T, T) -> T,
        y: &Tensor<T>,
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.slot(a, grads) {
            for i in 0..g.len() {
                ga[i] += g[i] * d(x[i], y.data()[i]);
            }
        }
    }

    /// Gradient accumulator for `v`, allocated lazily; `None` if `v` needs no gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Sums a gradient of shape `out` down to the broadcast input shape `input`.
fn reduce_into<T: Scalar>(dst: &mut [T], g: &[T], input: &[usize], out: &[usize]) {
    if input == out {
        add_into(dst, g);
        return;
    }
    for (gi, o) in g.iter().zip(broadcast_offsets(input, out)) {
        dst[o] += *gi;
    }
}

fn permute_offsets(input: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(input);
    let out_shape: Vec<usize> = axes.iter().map(|&x| input[x]).collect();
    let step: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
    let n: usize = input.iter().product();
    let rank = axes.len();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0;
    for _ in 0..n {
        offs.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `out[m×n] += a[m×p] · b[p×n]`
fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let x = a[i * p + k];
            if x == T::zero() {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
}

/// `out[m×p] += g[m×n] · b[p×n]ᵀ`
fn gemm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * p + k] += acc;
        }
    }
}

/// `out[p×n] += a[m×p]ᵀ · g[m×n]`
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let x = a[i * p + k];
            if x == T::zero() {
                continue;
            }
            let orow = &mut out[k * n..(k + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += x * gv;
            }
        }
    }
}
