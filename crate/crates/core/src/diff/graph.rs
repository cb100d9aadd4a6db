use std::collections::HashMap;

use super::tensor::{dot, log_softmax_rows, matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows, Real, Tensor};
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Handle to an integer (token id) input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokensVar(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    ClampMax(Var, T),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gather { table: Var, ids: TokensVar },
    SliceRows { a: Var, start: usize },
    PadRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::ClampMax(..) => "clamp_max",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceRows { .. } => "slice_rows",
            Op::PadRows(..) => "pad_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    // Op-specific forward cache: softmax probabilities for cross-entropy,
    // normalized input followed by per-row inverse std for layer norm.
    aux: Vec<T>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Define-by-run computation graph over dense tensors.
///
/// Ops evaluate eagerly and record their inputs and outputs in topological
/// order; [`Graph::backward`] replays the record in reverse. Leaves bound
/// without tracking are treated as constants, and no gradient work is spent
/// on subgraphs that only depend on constants.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, Var>,
    token_inputs: Vec<(String, Vec<usize>)>,
    allow_nonfinite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: HashMap::new(),
            token_inputs: Vec::new(),
            allow_nonfinite: false,
        }
    }

    /// A graph whose leaves may hold NaN or infinite values.
    pub fn propagating_nonfinite() -> Self {
        Self {
            allow_nonfinite: true,
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
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    /// Binds a named floating-point input. Only tracked inputs receive gradients.
    pub fn bind(&mut self, name: &str, value: Tensor<T>, track: bool) -> Result<Var, DiffError> {
        if self.named.contains_key(name) || self.token_inputs.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateInput(name.to_string()));
        }
        if !self.allow_nonfinite && !value.is_finite() {
            return Err(DiffError::NonFinite(name.to_string()));
        }
        let v = self.push_leaf(value, track);
        self.named.insert(name.to_string(), v);
        Ok(v)
    }

    /// Tracked named input.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Result<Var, DiffError> {
        self.bind(name, value, true)
    }

    /// Anonymous constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, DiffError> {
        if !self.allow_nonfinite && !value.is_finite() {
            return Err(DiffError::NonFinite(format!("constant node {}", self.nodes.len())));
        }
        Ok(self.push_leaf(value, false))
    }

    /// Named integer input (token ids). Never differentiable.
    pub fn tokens(&mut self, name: &str, ids: Vec<usize>) -> Result<TokensVar, DiffError> {
        if self.named.contains_key(name) || self.token_inputs.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateInput(name.to_string()));
        }
        self.token_inputs.push((name.to_string(), ids));
        Ok(TokensVar(self.token_inputs.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, track: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: track,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var], aux: Vec<T>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), DiffError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(self.mismatch(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b], Vec::new()))
    }

    /// `a[m,n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (_, n) = self.matrix_dims("add_row", a)?;
        if self.shape(bias) != [n] {
            return Err(self.mismatch("add_row", format!("bias {:?} for {n} columns", self.shape(bias))));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), out, &[a, bias], Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b], Vec::new()))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b], Vec::new()))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(Op::Scale(a, c), out, &[a], Vec::new()))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: T) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| x + c);
        Ok(self.push(Op::Shift(a), out, &[a], Vec::new()))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.scale(a, -T::one())
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b], Vec::new()))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNT(a, b), out, &[a, b], Vec::new()))
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<usize, DiffError> {
        match self.shape(a).last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(self.mismatch(op, format!("needs a non-empty last axis, got {:?}", self.shape(a)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let c = self.last_axis("softmax", a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), c))?;
        Ok(self.push(Op::Softmax(a), out, &[a], Vec::new()))
    }

    /// Log-softmax over the last axis, computed with the max-shift.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let c = self.last_axis("log_softmax", a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), log_softmax_rows(t.data(), c))?;
        Ok(self.push(Op::LogSoftmax(a), out, &[a], Vec::new()))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(T::ln);
        Ok(self.push(Op::Log(a), out, &[a], Vec::new()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(T::exp);
        Ok(self.push(Op::Exp(a), out, &[a], Vec::new()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        Ok(self.push(Op::Sigmoid(a), out, &[a], Vec::new()))
    }

    /// `min(a, max)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, max: T) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| if x < max { x } else { max });
        Ok(self.push(Op::ClampMax(a, max), out, &[a], Vec::new()))
    }

    /// Row-wise layer normalization with learned gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(self.mismatch(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of(n as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); m * n];
        let mut aux = vec![T::zero(); m * n + m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                aux[i * n + j] = xhat;
                out[i * n + j] = xhat * g[j] + b[j];
            }
            aux[m * n + i] = rstd;
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out, &[x, gain, bias], aux))
    }

    /// Embedding lookup: rows of `table[v,d]` selected by token ids.
    pub fn gather(&mut self, table: Var, ids: TokensVar) -> Result<Var, DiffError> {
        let (v, d) = self.matrix_dims("gather", table)?;
        let idx = &self.token_inputs[ids.0].1;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(DiffError::IndexOutOfRange {
                node: self.nodes.len(),
                index: bad,
                bound: v,
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(Op::Gather { table, ids }, out, &[table], Vec::new()))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (m, n) = self.matrix_dims("slice_rows", a)?;
        if start + len > m {
            return Err(self.mismatch("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(Op::SliceRows { a, start }, out, &[a], Vec::new()))
    }

    /// Appends zero rows up to `total` rows.
    pub fn pad_rows(&mut self, a: Var, total: usize) -> Result<Var, DiffError> {
        let (m, n) = self.matrix_dims("pad_rows", a)?;
        if total < m {
            return Err(self.mismatch("pad_rows", format!("cannot pad {m} rows to {total}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.resize(total * n, T::zero());
        let out = Tensor::new(vec![total, n], data)?;
        Ok(self.push(Op::PadRows(a), out, &[a], Vec::new()))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(self.mismatch("reshape", format!("{:?} to {shape:?}", t.shape())));
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(Op::Reshape(a), out, &[a], Vec::new()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), &[a], Vec::new()))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(self.mismatch("mean", "mean of an empty tensor".into()));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        Ok(self.push(Op::Mean(a), Tensor::scalar(s), &[a], Vec::new()))
    }

    /// Fused log-softmax + gather: per-row negative log-likelihood of `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let (m, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(self.mismatch("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(DiffError::IndexOutOfRange {
                node: self.nodes.len(),
                index: bad,
                bound: v,
            });
        }
        let x = self.value(logits).data();
        let logp = log_softmax_rows(x, v);
        let nll: Vec<T> = targets.iter().enumerate().map(|(i, &t)| -logp[i * v + t]).collect();
        let probs = logp.into_iter().map(T::exp).collect();
        let out = Tensor::vector(nll);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            out,
            &[logits],
            probs,
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients of every tracked leaf.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>, DiffError> {
        let root = &self.nodes[out.0];
        if root.value.len() != 1 {
            return Err(DiffError::NotScalar {
                node: out.0,
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![T::one()]);

        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut leaf_grads = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                leaf_grads.insert(id, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { by_node: leaf_grads })
    }

    /// Gradients of a scalar output with respect to named inputs.
    pub fn gradients(&self, out: Var, wrt: &[&str]) -> Result<HashMap<String, Tensor<T>>, DiffError> {
        let mut targets = Vec::with_capacity(wrt.len());
        for &name in wrt {
            match self.named.get(name) {
                Some(&v) if self.nodes[v.0].needs_grad => targets.push((name, v)),
                Some(_) => return Err(DiffError::Untracked(name.to_string())),
                None if self.token_inputs.iter().any(|(n, _)| n == name) => {
                    return Err(DiffError::NotDifferentiable(name.to_string()))
                }
                None => return Err(DiffError::UnknownInput(name.to_string())),
            }
        }
        let mut all = self.backward(out)?;
        Ok(targets
            .into_iter()
            .map(|(name, v)| (name.to_string(), all.take(v).expect("tracked leaf")))
            .collect())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |s| axpy(s, g, T::one()));
                acc(b, &mut |s| axpy(s, g, T::one()));
            }
            Op::AddRow(a, bias) => {
                acc(a, &mut |s| axpy(s, g, T::one()));
                let n = self.nodes[bias.0].value.len();
                acc(bias, &mut |s| {
                    for row in g.chunks(n) {
                        axpy(s, row, T::one());
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(a, &mut |s| axpy(s, g, T::one()));
                acc(b, &mut |s| axpy(s, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |s| {
                    for ((o, &gi), &bi) in s.iter_mut().zip(g).zip(vb) {
                        *o = *o + gi * bi;
                    }
                });
                acc(b, &mut |s| {
                    for ((o, &gi), &ai) in s.iter_mut().zip(g).zip(va) {
                        *o = *o + gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |s| axpy(s, g, c)),
            Op::Shift(a) => acc(a, &mut |s| axpy(s, g, T::one())),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if wants(a) {
                    acc(a, &mut |s| matmul_nt_into(g, val(b), s, m, n, k));
                }
                if wants(b) {
                    acc(b, &mut |s| matmul_tn_into(val(a), g, s, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.rows();
                if wants(a) {
                    acc(a, &mut |s| matmul_into(g, val(b), s, m, n, k));
                }
                if wants(b) {
                    acc(b, &mut |s| matmul_tn_into(g, val(a), s, m, n, k));
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let inner = dot(grow, yrow);
                        for ((o, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yi * (gi - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total = grow.iter().copied().sum::<T>();
                        for ((o, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = val(a);
                acc(a, &mut |s| {
                    for ((o, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        *o = *o + gi / xi;
                    }
                });
            }
            Op::Exp(a) => acc(a, &mut |s| {
                for ((o, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                    *o = *o + gi * yi;
                }
            }),
            Op::Sigmoid(a) => acc(a, &mut |s| {
                for ((o, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                    *o = *o + gi * yi * (T::one() - yi);
                }
            }),
            Op::ClampMax(a, max) => {
                let x = val(a);
                acc(a, &mut |s| {
                    for ((o, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi < max {
                            *o = *o + gi;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let (xhat, rstd) = node.aux.split_at(m * n);
                let gv = val(gain);
                acc(gain, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[j] = s[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(bias, &mut |s| {
                    for row in g.chunks(n) {
                        axpy(s, row, T::one());
                    }
                });
                let nf = T::of(n as f64);
                acc(x, &mut |s| {
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let (grow, xrow) = (&g[i * n..(i + 1) * n], &xhat[i * n..(i + 1) * n]);
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                        let mean_dx = dot(&dxhat, xrow) / nf;
                        for j in 0..n {
                            s[i * n + j] = s[i * n + j] + rstd[i] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                let idx = &self.token_inputs[ids.0].1;
                acc(table, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let n = node.value.cols();
                acc(a, &mut |s| axpy(&mut s[start * n..start * n + g.len()], g, T::one()));
            }
            Op::PadRows(a) => acc(a, &mut |s| {
                let len = s.len();
                axpy(s, &g[..len], T::one());
            }),
            Op::Reshape(a) => acc(a, &mut |s| axpy(s, g, T::one())),
            Op::Sum(a) => acc(a, &mut |s| s.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Mean(a) => {
                let n = T::of(self.nodes[a.0].value.len() as f64);
                acc(a, &mut |s| s.iter_mut().for_each(|o| *o = *o + g[0] / n));
            }
            Op::CrossEntropy { logits, ref targets } => {
                let v = self.nodes[logits.0].value.cols();
                let probs = &node.aux;
                acc(logits, &mut |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        let (srow, prow) = (&mut s[i * v..(i + 1) * v], &probs[i * v..(i + 1) * v]);
                        for (o, &p) in srow.iter_mut().zip(prow) {
                            *o = *o + g[i] * p;
                        }
                        srow[t] = srow[t] - g[i];
                    }
                });
            }
        }
    }

    /// Operation name of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + c * s;
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_node.remove(&v.0)
    }

    pub fn all_finite(&self) -> bool {
        self.by_node.values().all(Tensor::is_finite)
    }
}
