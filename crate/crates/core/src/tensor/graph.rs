use super::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, b_transposed: bool },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;

/// Records operations as they execute; [`Graph::backward`] consumes it.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.node(v).shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("expected rank-2 operand, got {s:?}"))),
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Inserts a tensor as a leaf, tracking gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn param(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, true))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.node(a).shape.clone(), value, Op::Scale(a, factor), rg)
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m, k] · bᵀ` with `b [n, k]`; the layout of a linear layer's weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {kb} (transposed={b_transposed})")));
        }
        let mut value = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a), false, self.value(b), b_transposed, &mut value, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, b_transposed }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let rg = self.rg(&[a]);
        self.push(self.node(a).shape.clone(), value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization of `x [n, d]` with affine `gain`, `bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape(format!("layer norm affine params must have length {d}")));
        }
        let eps = T::lit(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                value[r * d + c] = (row[c] - mean) * rs * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(vec![n, d], value, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Gathers rows of `table [v, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let src = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TargetOutOfRange { target: id, vocab: v });
            }
            value.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), d], value, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Multi-head causal self-attention over `q, k, v` of shape `[n, d]`.
    /// Position `i` attends to positions `0..=i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(q)?;
        if self.node(k).shape != [n, d] || self.node(v).shape != [n, d] {
            return Err(Error::Shape("attention operands must share shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            let off = h * dh;
            // S = Q_h K_hᵀ
            unsafe {
                T::gemm_raw(
                    n,
                    dh,
                    n,
                    scale,
                    qs[off..].as_ptr(),
                    d as isize,
                    1,
                    ks[off..].as_ptr(),
                    1,
                    d as isize,
                    T::zero(),
                    p.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row[..=i].iter_mut() {
                    *x = *x / total;
                }
                row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
            }
            // O_h = P V_h
            unsafe {
                T::gemm_raw(
                    n,
                    n,
                    dh,
                    T::one(),
                    p.as_ptr(),
                    n as isize,
                    1,
                    vs[off..].as_ptr(),
                    d as isize,
                    1,
                    T::zero(),
                    out[off..].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(vec![n, d], out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let (n, v) = self.dims2(logits)?;
        let xs = self.value(logits);
        if xs.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut value = vec![T::zero(); n * v];
        for r in 0..n {
            softmax_into(&xs[r * v..(r + 1) * v], &mut value[r * v..(r + 1) * v]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![n, v], value, Op::SoftmaxRows(logits), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { target: t, vocab: v });
        }
        if n == 0 {
            return Err(Error::Shape("cross entropy over zero rows".into()));
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for r in 0..n {
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[targets[r]];
            softmax_into(row, &mut probs[r * v..(r + 1) * v]);
        }
        let loss = total / T::from_usize(n).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.value(a).len().max(1);
        let s = self.value(a).iter().copied().sum::<T>() / T::from_usize(len).unwrap();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
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
                Op::Add(a, b) => {
                    check_order(&[Some(*a), Some(*b)], i);
                    for x in [a, b] {
                        if let Some(buf) = grad_buf(&mut grads, nodes, *x) {
                            add_assign(buf, &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    check_order(&[Some(*a), Some(*b)], i);
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(buf) = grad_buf(&mut grads, nodes, *a) {
                        buf.iter_mut().zip(g.iter().zip(vb)).for_each(|(o, (&g, &y))| *o += g * y);
                    }
                    if let Some(buf) = grad_buf(&mut grads, nodes, *b) {
                        buf.iter_mut().zip(g.iter().zip(va)).for_each(|(o, (&g, &x))| *o += g * x);
                    }
                }
                Op::Scale(a, f) => {
                    check_order(&[Some(*a)], i);
                    if let Some(buf) = grad_buf(&mut grads, nodes, *a) {
                        buf.iter_mut().zip(&g).for_each(|(o, &g)| *o += g * *f);
                    }
                }
                Op::MatMul { a, b, b_transposed } => {
                    check_order(&[Some(*a), Some(*b)], i);
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = node.shape[1];
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    // dA = dC · op(B)ᵀ
                    if let Some(buf) = grad_buf(&mut grads, nodes, *a) {
                        matmul_into(m, n, k, &g, false, vb, !b_transposed, buf, true);
                    }
                    if let Some(buf) = grad_buf(&mut grads, nodes, *b) {
                        if *b_transposed {
                            // B is [n, k]: dB = dCᵀ · A
                            matmul_into(n, m, k, &g, true, va, false, buf, true);
                        } else {
                            // B is [k, n]: dB = Aᵀ · dC
                            matmul_into(k, m, n, va, true, &g, false, buf, true);
                        }
                    }
                }
                Op::Gelu(a) => {
                    check_order(&[Some(*a)], i);
                    let va = &nodes[a.0].value;
                    if let Some(buf) = grad_buf(&mut grads, nodes, *a) {
                        buf.iter_mut().zip(g.iter().zip(va)).for_each(|(o, (&g, &x))| *o += g * gelu(x).1);
                    }
                }
                Op::LayerNorm { x, gain, bias, rstd } => {
                    check_order(&[Some(*x), Some(*gain), Some(*bias)], i);
                    layer_norm_backward(&mut grads, nodes, &g, *x, *gain, *bias, rstd);
                }
                Op::Embedding { table, ids } => {
                    check_order(&[Some(*table)], i);
                    let d = nodes[table.0].shape[1];
                    if let Some(buf) = grad_buf(&mut grads, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_assign(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    check_order(&[Some(*q), Some(*k), Some(*v)], i);
                    attention_backward(&mut grads, nodes, &g, *q, *k, *v, *heads, probs);
                }
                Op::SoftmaxRows(a) => {
                    check_order(&[Some(*a)], i);
                    let cols = node.shape[1];
                    let y = &node.value;
                    if let Some(buf) = grad_buf(&mut grads, nodes, *a) {
                        for r in 0..node.shape[0] {
                            let span = r * cols..(r + 1) * cols;
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            for ((o, &yv), &gv) in buf[span].iter_mut().zip(yr).zip(gr) {
                                *o += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    check_order(&[Some(*logits)], i);
                    let v = nodes[logits.0].shape[1];
                    let f = g[0] / T::from_usize(targets.len()).unwrap();
                    if let Some(buf) = grad_buf(&mut grads, nodes, *logits) {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &mut buf[r * v..(r + 1) * v];
                            for (o, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                                *o += p * f;
                            }
                            row[t] -= f;
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    check_order(&[Some(*a)], i);
                    let mut f = g[0];
                    if matches!(node.op, Op::Mean(_)) {
                        f = f / T::from_usize(nodes[a.0].value.len().max(1)).unwrap();
                    }
                    if let Some(buf) = grad_buf(&mut grads, nodes, *a) {
                        buf.iter_mut().for_each(|o| *o += f);
                    }
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves of a consumed graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, `None` if it does not require gradients or is unreachable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_order(inputs: &[Option<Var>], at: usize) {
    for v in inputs.iter().flatten() {
        assert!(v.0 < at, "graph cycle: node {at} consumes node {}", v.0);
    }
}

fn grad_buf<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

/// GELU value and derivative.
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (value, deriv)
}

fn layer_norm_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    g: &[T],
    x: Var,
    gain: Var,
    bias: Var,
    rstd: &[T],
) {
    let (n, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
    let xs = &nodes[x.0].value;
    let gv = &nodes[gain.0].value;
    let dn = T::from_usize(d).unwrap();
    let mut xhat = vec![T::zero(); n * d];
    for r in 0..n {
        let row = &xs[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        for c in 0..d {
            xhat[r * d + c] = (row[c] - mean) * rstd[r];
        }
    }
    if let Some(buf) = grad_buf(grads, nodes, gain) {
        for r in 0..n {
            for c in 0..d {
                buf[c] += g[r * d + c] * xhat[r * d + c];
            }
        }
    }
    if let Some(buf) = grad_buf(grads, nodes, bias) {
        for r in 0..n {
            add_assign(buf, &g[r * d..(r + 1) * d]);
        }
    }
    if let Some(buf) = grad_buf(grads, nodes, x) {
        let mut dxhat = vec![T::zero(); d];
        for r in 0..n {
            let span = r * d..(r + 1) * d;
            let xh = &xhat[span.clone()];
            for c in 0..d {
                dxhat[c] = g[r * d + c] * gv[c];
            }
            let m1 = dxhat.iter().copied().sum::<T>() / dn;
            let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
            for ((o, &dh), &xv) in buf[span].iter_mut().zip(&dxhat).zip(xh) {
                *o += rstd[r] * (dh - m1 - xv * m2);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[T],
) {
    let (n, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n * n];
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        let off = h * dh;
        unsafe {
            // dP = dO_h V_hᵀ
            T::gemm_raw(
                n,
                dh,
                n,
                T::one(),
                g[off..].as_ptr(),
                d as isize,
                1,
                vs[off..].as_ptr(),
                1,
                d as isize,
                T::zero(),
                dp.as_mut_ptr(),
                n as isize,
                1,
            );
            // dV_h = Pᵀ dO_h
            T::gemm_raw(
                n,
                n,
                dh,
                T::one(),
                p.as_ptr(),
                1,
                n as isize,
                g[off..].as_ptr(),
                d as isize,
                1,
                T::zero(),
                dv[off..].as_mut_ptr(),
                d as isize,
                1,
            );
        }
        // dS = P ⊙ (dP − rowdot(dP, P)) · scale
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum::<T>();
            for j in 0..n {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
            }
        }
        unsafe {
            // dQ_h = dS K_h
            T::gemm_raw(
                n,
                n,
                dh,
                T::one(),
                dp.as_ptr(),
                n as isize,
                1,
                ks[off..].as_ptr(),
                d as isize,
                1,
                T::zero(),
                dq[off..].as_mut_ptr(),
                d as isize,
                1,
            );
            // dK_h = dSᵀ Q_h
            T::gemm_raw(
                n,
                n,
                dh,
                T::one(),
                dp.as_ptr(),
                1,
                n as isize,
                qs[off..].as_ptr(),
                d as isize,
                1,
                T::zero(),
                dk[off..].as_mut_ptr(),
                d as isize,
                1,
            );
        }
    }
    for (var, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(buf) = grad_buf(grads, nodes, var) {
            add_assign(buf, &local);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param([3], vec![1.0, -2.0, 5.0]).unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param([2], vec![2.0, -1.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param([2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let w = g.constant([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = g.param([1, 2], vec![1.0, 1.0]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0]);
    }

    fn softmax_of(row: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant([1, row.len()], row.to_vec()).unwrap();
        let y = g.softmax_rows(x).unwrap();
        g.value(y).to_vec()
    }

    #[test]
    fn softmax_examples() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&softmax_of(&[0.0, 0.0]), &[0.5, 0.5]));
        assert!(close(&softmax_of(&[1000.0, 1000.0]), &[0.5, 0.5]));
        assert!(close(&softmax_of(&[1f64.ln(), 3f64.ln()]), &[0.25, 0.75]));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f32>::new();
        let x = g.constant([1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut g = Graph::<f32>::new();
        let x = g.constant([2, 259], vec![0.0; 2 * 259]).unwrap();
        let l = g.cross_entropy(x, &[3, 100]).unwrap();
        assert!((g.value(l)[0] - 259f32.ln()).abs() < 1e-5);

        let mut logits = vec![0.0f64; 4];
        logits[2] = 200.0;
        let mut g = Graph::<f64>::new();
        let x = g.constant([1, 4], logits).unwrap();
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!(g.value(l)[0] < 1e-80);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::<f32>::new();
        let x = g.constant([1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::TargetOutOfRange { target: 3, vocab: 3 })));
    }

    #[test]
    fn attention_first_position_copies_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant([2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let o = g.causal_attention(q, q, v, 1).unwrap();
        assert_eq!(&g.value(o)[..2], &[3.0, 4.0]);
    }
}
