//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass and replays
//! them in reverse to accumulate gradients. Tensors are row-major, rank 1 or 2;
//! everything is 64-bit so gradient checks against finite differences stay
//! clean. Learnable parameters live in a [`Params`] store outside the tape;
//! leaves created from them remember their [`ParamId`] so gradients can be
//! scattered back after `backward`.
//!
//! The matrix-multiply inner kernel is delegated to `matrixmultiply::dgemm`;
//! all other primitives and the tape itself are implemented here.

use crate::error::{Error, Result};
use crate::rng::RunRng;
use rand::Rng;

/// Dense real tensor: shape, row-major values, and an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape { op: "tensor", details: format!("zero dimension in {shape:?}") });
        }
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                details: format!("shape {shape:?} wants {numel} values, got {}", values.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), values, requires_grad, grad: None })
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; numel], requires_grad, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a named tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of learnable parameters. The insertion order is
/// fixed by network construction, which makes initialization and checkpoint
/// layout deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` initialized uniform in `[-a, a]`,
    /// `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut RunRng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect();
        self.add(name, Tensor { shape: vec![fan_in, fan_out], values, requires_grad: true, grad: None })
    }

    /// Bias vector initialized to zeros.
    pub fn add_zeros(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len], true))
    }

    /// Free vector initialized like a Glorot row with fan_in 1.
    pub fn add_vector_glorot(&mut self, name: &str, len: usize, rng: &mut RunRng) -> ParamId {
        let a = (6.0 / (1 + len) as f64).sqrt();
        let values = (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect();
        self.add(name, Tensor { shape: vec![len], values, requires_grad: true, grad: None })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut_indexed(&mut self) -> impl Iterator<Item = (usize, (&str, &mut Tensor))> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
            .enumerate()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Resets every gradient buffer to zeros. Must be called before each
    /// optimizer step; gradients otherwise accumulate across backward passes.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            match &mut t.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => t.grad = Some(vec![0.0; t.numel()]),
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    ScaleAdd { a: usize, alpha: f64 },
    Tanh { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Log { a: usize },
    SoftmaxRows { a: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumRows { a: usize },
    TileRows { a: usize },
    StraightThrough { soft: usize },
    Mse { pred: usize, target: usize },
    CrossEntropyLogits { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// Ordered record of primitive operations. Appending keeps nodes in
/// topological order, so one reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank checked at construction"),
    }
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

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { values, shape, requires_grad, op, param: None });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, values: &[f64], shape: &[usize], requires_grad: bool) -> Result<Var> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape { op: "leaf", details: format!("rank must be 1 or 2, got {shape:?}") });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "leaf",
                details: format!("shape {shape:?} wants {numel} values, got {}", values.len()),
            });
        }
        Ok(self.push(values.to_vec(), shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Leaf that mirrors a parameter; its gradient is scattered back to the
    /// store by [`Tape::scatter_param_grads`].
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        let t = params.get(id);
        let v = self.push(t.values.clone(), t.shape.clone(), t.requires_grad, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    fn requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- primitives -----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (&[m, k], &[k2, n]) = match (sa.as_slice(), sb.as_slice()) {
            (x @ [_, _], y @ [_, _]) => (
                <&[usize; 2]>::try_from(x).unwrap(),
                <&[usize; 2]>::try_from(y).unwrap(),
            ),
            _ => {
                return Err(Error::Shape { op: "matmul", details: format!("need rank-2 operands, got {sa:?} x {sb:?}") });
            }
        };
        if k != k2 {
            return Err(Error::Shape { op: "matmul", details: format!("{m}x{k} vs {k2}x{n}") });
        }
        let mut out = vec![0.0; m * n];
        dgemm_rm(m, k, n, 1.0, &self.nodes[a.0].values, false, &self.nodes[b.0].values, false, 0.0, &mut out);
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], req, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op: "add",
                details: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<f64> =
            self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(out, shape, req, Op::Add { a: a.0, b: b.0 }))
    }

    /// `[r,c] + [c]`: the bias row is added to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = rows_cols(&self.nodes[a.0].shape);
        let bs = &self.nodes[bias.0].shape;
        if bs.len() != 1 || bs[0] != c {
            return Err(Error::Shape {
                op: "add_row",
                details: format!("{:?} + {:?}", self.nodes[a.0].shape, bs),
            });
        }
        let mut out = self.nodes[a.0].values.clone();
        for row in out.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&self.nodes[bias.0].values) {
                *x += b;
            }
        }
        let shape = if r == 1 && self.nodes[a.0].shape.len() == 1 { vec![c] } else { vec![r, c] };
        let req = self.requires(&[a.0, bias.0]);
        Ok(self.push(out, shape, req, Op::AddRow { a: a.0, bias: bias.0 }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op: "mul",
                details: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<f64> =
            self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(out, shape, req, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Elementwise affine map `alpha * x + beta`.
    pub fn scale_add(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| alpha * x + beta).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.nodes[a.0].requires_grad;
        self.push(out, shape, req, Op::ScaleAdd { a: a.0, alpha })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |i| Op::Tanh { a: i })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |i| Op::Relu { a: i })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |i| Op::Sigmoid { a: i })
    }

    /// Natural logarithm; caller guarantees positive inputs.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |i| Op::Log { a: i })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Var {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.nodes[a.0].requires_grad;
        self.push(out, shape, req, op(a.0))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(&self.nodes[a.0].shape);
        let mut out = Vec::with_capacity(self.nodes[a.0].values.len());
        for row in self.nodes[a.0].values.chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / s));
        }
        let shape = self.nodes[a.0].shape.clone();
        let req = self.nodes[a.0].requires_grad;
        self.push(out, shape, req, Op::SoftmaxRows { a: a.0 })
    }

    /// Concatenates along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat_cols", details: "no operands".into() });
        }
        let (r0, _) = rows_cols(&self.nodes[parts[0].0].shape);
        let rank2 = self.nodes[parts[0].0].shape.len() == 2;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = rows_cols(&self.nodes[p.0].shape);
            if r != r0 {
                return Err(Error::Shape {
                    op: "concat_cols",
                    details: format!("row mismatch: {r0} vs {r}"),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r0 * total);
        for row in 0..r0 {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].values[row * w..(row + 1) * w]);
            }
        }
        let shape = if rank2 || r0 > 1 { vec![r0, total] } else { vec![total] };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let req = self.requires(&ids);
        Ok(self.push(out, shape, req, Op::ConcatCols { parts: ids }))
    }

    /// Sum of all entries, yielding a scalar `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let req = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], req, Op::SumAll { a: a.0 })
    }

    /// Mean of all entries, yielding a scalar `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].values.len() as f64;
        let s: f64 = self.nodes[a.0].values.iter().sum::<f64>() / n;
        let req = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], req, Op::MeanAll { a: a.0 })
    }

    /// Row sums over the last axis: `[r,c] -> [r,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(&self.nodes[a.0].shape);
        let out: Vec<f64> = self.nodes[a.0].values.chunks(c).map(|row| row.iter().sum()).collect();
        let req = self.nodes[a.0].requires_grad;
        self.push(out, vec![r, 1], req, Op::SumRows { a: a.0 })
    }

    /// Broadcasts a `[c]` vector to `[rows, c]`.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 1 {
            return Err(Error::Shape { op: "tile_rows", details: format!("need rank-1 input, got {s:?}") });
        }
        let c = s[0];
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].values);
        }
        let req = self.nodes[a.0].requires_grad;
        Ok(self.push(out, vec![rows, c], req, Op::TileRows { a: a.0 }))
    }

    /// Forward pass sees `hard` (a constant snapshot); the gradient flows to
    /// `soft` unchanged. `hard` must be shape-congruent with `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: &[f64]) -> Result<Var> {
        if hard.len() != self.nodes[soft.0].values.len() {
            return Err(Error::Shape {
                op: "straight_through",
                details: format!("hard len {} vs soft len {}", hard.len(), self.nodes[soft.0].values.len()),
            });
        }
        let shape = self.nodes[soft.0].shape.clone();
        let req = self.nodes[soft.0].requires_grad;
        Ok(self.push(hard.to_vec(), shape, req, Op::StraightThrough { soft: soft.0 }))
    }

    /// Mean squared error over all entries: scalar `[1]`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(Error::Shape {
                op: "mse",
                details: format!("{:?} vs {:?}", self.nodes[pred.0].shape, self.nodes[target.0].shape),
            });
        }
        let n = self.nodes[pred.0].values.len() as f64;
        let s: f64 = self.nodes[pred.0]
            .values
            .iter()
            .zip(&self.nodes[target.0].values)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let req = self.requires(&[pred.0, target.0]);
        Ok(self.push(vec![s / n], vec![1], req, Op::Mse { pred: pred.0, target: target.0 }))
    }

    /// Mean cross-entropy of logits `[r, c]` against one target class per
    /// row, fused with a max-subtracted log-softmax.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols(&self.nodes[logits.0].shape);
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                details: format!("{r} rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Usage(format!("cross_entropy_logits: target {bad} out of range 0..{c}")));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (row, &t) in self.nodes[logits.0].values.chunks(c).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            loss += s.ln() + m - row[t];
            probs.extend(exps.iter().map(|e| e / s));
        }
        let req = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![loss / r as f64],
            vec![1],
            req,
            Op::CrossEntropyLogits { logits: logits.0, targets: targets.to_vec(), probs },
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Accumulates `d(loss)/d(node)` for every node reachable from `loss`.
    /// Fan-out adds contributions; forward values are left untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g_out) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g_out);
            self.grads[idx] = Some(g_out);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // `nodes` is only read and `grads` only written during the reverse
        // sweep, so the two fields are borrowed disjointly. Inputs always
        // precede outputs on the tape; an op consuming the same node twice
        // accumulates into it sequentially.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        macro_rules! gbuf {
            ($i:expr) => {
                grad_buf(grads, nodes[$i].values.len(), $i)
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, _) = rows_cols(&nodes[a].shape);
                let (kk, n) = rows_cols(&nodes[b].shape);
                if nodes[a].requires_grad {
                    dgemm_rm(m, n, kk, 1.0, g, false, &nodes[b].values, true, 1.0, gbuf!(a));
                }
                if nodes[b].requires_grad {
                    dgemm_rm(kk, m, n, 1.0, &nodes[a].values, true, g, false, 1.0, gbuf!(b));
                }
            }
            Op::Add { a, b } => {
                for i in [*a, *b] {
                    if nodes[i].requires_grad {
                        accumulate(gbuf!(i), g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if nodes[*a].requires_grad {
                    accumulate(gbuf!(*a), g);
                }
                if nodes[*bias].requires_grad {
                    let c = nodes[*bias].values.len();
                    let db = gbuf!(*bias);
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if nodes[*a].requires_grad {
                    let da = gbuf!(*a);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(&nodes[*b].values) {
                        *d += x * y;
                    }
                }
                if nodes[*b].requires_grad {
                    let db = gbuf!(*b);
                    for ((d, x), y) in db.iter_mut().zip(g).zip(&nodes[*a].values) {
                        *d += x * y;
                    }
                }
            }
            Op::ScaleAdd { a, alpha } => {
                if nodes[*a].requires_grad {
                    let da = gbuf!(*a);
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += alpha * x;
                    }
                }
            }
            Op::Tanh { a } => {
                if nodes[*a].requires_grad {
                    let da = gbuf!(*a);
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(&nodes[idx].values) {
                        *d += (1.0 - y * y) * gi;
                    }
                }
            }
            Op::Relu { a } => {
                if nodes[*a].requires_grad {
                    let da = gbuf!(*a);
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(&nodes[*a].values) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if nodes[*a].requires_grad {
                    let da = gbuf!(*a);
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(&nodes[idx].values) {
                        *d += y * (1.0 - y) * gi;
                    }
                }
            }
            Op::Log { a } => {
                if nodes[*a].requires_grad {
                    let da = gbuf!(*a);
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(&nodes[*a].values) {
                        *d += gi / x;
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if nodes[*a].requires_grad {
                    let (_, c) = rows_cols(&nodes[idx].shape);
                    let da = gbuf!(*a);
                    for ((drow, grow), yrow) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(nodes[idx].values.chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| rows_cols(&nodes[p].shape).1).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if nodes[p].requires_grad {
                        let dp = gbuf!(p);
                        for row in 0..rows {
                            let src = &g[row * total + offset..row * total + offset + w];
                            for (d, x) in dp[row * w..(row + 1) * w].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SumAll { a } => {
                if nodes[*a].requires_grad {
                    for d in gbuf!(*a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                if nodes[*a].requires_grad {
                    let n = nodes[*a].values.len() as f64;
                    for d in gbuf!(*a).iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::SumRows { a } => {
                if nodes[*a].requires_grad {
                    let (_, c) = rows_cols(&nodes[*a].shape);
                    let da = gbuf!(*a);
                    for (drow, gi) in da.chunks_mut(c).zip(g) {
                        for d in drow {
                            *d += gi;
                        }
                    }
                }
            }
            Op::TileRows { a } => {
                if nodes[*a].requires_grad {
                    let c = nodes[*a].values.len();
                    let da = gbuf!(*a);
                    for row in g.chunks(c) {
                        for (d, x) in da.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::StraightThrough { soft } => {
                if nodes[*soft].requires_grad {
                    accumulate(gbuf!(*soft), g);
                }
            }
            Op::Mse { pred, target } => {
                let n = nodes[*pred].values.len() as f64;
                let scale = 2.0 * g[0] / n;
                if nodes[*pred].requires_grad {
                    let dp = gbuf!(*pred);
                    for ((d, p), t) in dp.iter_mut().zip(&nodes[*pred].values).zip(&nodes[*target].values) {
                        *d += scale * (p - t);
                    }
                }
                if nodes[*target].requires_grad {
                    let dt = gbuf!(*target);
                    for ((d, p), t) in dt.iter_mut().zip(&nodes[*pred].values).zip(&nodes[*target].values) {
                        *d += scale * (t - p);
                    }
                }
            }
            Op::CrossEntropyLogits { logits, targets, probs } => {
                if nodes[*logits].requires_grad {
                    let (r, c) = rows_cols(&nodes[*logits].shape);
                    let scale = g[0] / r as f64;
                    let dl = gbuf!(*logits);
                    for ((drow, prow), &t) in dl.chunks_mut(c).zip(probs.chunks(c)).zip(targets) {
                        for (j, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                            *d += scale * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }

    /// Adds every param leaf's gradient into the store. `Params::zero_grad`
    /// must have run before the backward pass whose result is scattered.
    pub fn scatter_param_grads(&self, params: &mut Params) -> Result<()> {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            let (Some(pid), Some(g)) = (node.param, grad) else { continue };
            let t = params.get_mut(pid);
            let dst = t.grad.as_mut().ok_or_else(|| {
                Error::Usage("scatter_param_grads: call zero_grad before backward".into())
            })?;
            accumulate(dst, g);
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], len: usize, i: usize) -> &'g mut [f64] {
    let slot = &mut grads[i];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}

/// Row-major `C <- alpha * A? * B? + beta * C` where `?` marks an optional
/// transpose expressed through strides. Thin wrapper over the vendored
/// dgemm kernel; dimensions are of the effective (post-transpose) operands.
fn dgemm_rm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "dgemm lhs size");
    assert_eq!(b.len(), k * n, "dgemm rhs size");
    assert_eq!(c.len(), m * n, "dgemm out size");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::new_rng;
    use approx::assert_relative_eq;

    /// Naive triple-loop product, the independent oracle for matmul.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_hand_computed_and_oracle() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut tape = Tape::new();
        let va = tape.leaf(&a, &[2, 3], false).unwrap();
        let vb = tape.leaf(&b, &[3, 2], false).unwrap();
        let vc = tape.matmul(va, vb).unwrap();
        // Row 0 of A dot col 0 of B: 1*7 + 2*9 + 3*11 = 58.
        assert_eq!(tape.value(vc)[0], 58.0);
        assert_eq!(tape.value(vc), matmul_oracle(&a, &b, 2, 3, 2).as_slice());
    }

    #[test]
    fn matmul_random_matches_oracle() {
        let mut rng = new_rng(11);
        for _ in 0..20 {
            let (m, k, n) = (
                1 + rng.gen_range(0..5usize),
                1 + rng.gen_range(0..5usize),
                1 + rng.gen_range(0..5usize),
            );
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let mut tape = Tape::new();
            let va = tape.leaf(&a, &[m, k], false).unwrap();
            let vb = tape.leaf(&b, &[k, n], false).unwrap();
            let vc = tape.matmul(va, vb).unwrap();
            for (got, want) in tape.value(vc).iter().zip(matmul_oracle(&a, &b, m, k, n)) {
                assert_relative_eq!(*got, want, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[1.0; 6], &[2, 3], false).unwrap();
        let b = tape.leaf(&[1.0; 8], &[4, 2], false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains('2') && msg.contains('4'), "got: {msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[0.0; 7], &[7], false).unwrap();
        let s = tape.softmax(v);
        for x in tape.value(s) {
            assert_relative_eq!(*x, 1.0 / 7.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = new_rng(3);
        let logits: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() * 200.0 - 100.0).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(&logits, &[8, 5], false).unwrap();
        let s = tape.softmax(v);
        for row in tape.value(s).chunks(5) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mse_identity_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[0.3, -1.5, 2.0], &[3], false).unwrap();
        let y = tape.leaf(&[0.3, -1.5, 2.0], &[3], false).unwrap();
        let l = tape.mse(x, y).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut rng = new_rng(9);
        for _ in 0..50 {
            let c = 2 + rng.gen_range(0..6usize);
            let logits: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() * 20.0 - 10.0).collect();
            let target = rng.gen_range(0..c);
            let mut tape = Tape::new();
            let v = tape.leaf(&logits, &[1, c], false).unwrap();
            let ce = tape.cross_entropy_logits(v, &[target]).unwrap();
            let sm = tape.softmax(v);
            let want = -tape.value(sm)[target].ln();
            assert!((tape.scalar(ce) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0, 3.0], &[3], true).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[5.0], &[1], true).unwrap();
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0], &[2], true).unwrap();
        let y = tape.scale_add(x, 2.0, 0.0);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    /// Central finite differences of a scalar function, the gradient oracle.
    pub(crate) fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            g.push((up - dn) / (2.0 * h));
        }
        g
    }

    fn check_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / denom <= rel,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn mse_linear_model_gradient_matches_finite_differences() {
        let mut rng = new_rng(17);
        for _ in 0..20 {
            let w: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let loss = |wv: &[f64]| {
                let mut tape = Tape::new();
                let w2 = tape.leaf(wv, &[2, 3], false).unwrap();
                let xv = tape.leaf(&x, &[3, 1], false).unwrap();
                let p = tape.matmul(w2, xv).unwrap();
                let t = tape.leaf(&y, &[2, 1], false).unwrap();
                let l = tape.mse(p, t).unwrap();
                tape.scalar(l)
            };
            let mut tape = Tape::new();
            let wv = tape.leaf(&w, &[2, 3], true).unwrap();
            let xv = tape.leaf(&x, &[3, 1], false).unwrap();
            let p = tape.matmul(wv, xv).unwrap();
            let t = tape.leaf(&y, &[2, 1], false).unwrap();
            let l = tape.mse(p, t).unwrap();
            tape.backward(l).unwrap();
            let numeric = finite_diff(loss, &w, 1e-5);
            check_close(tape.grad(wv).unwrap(), &numeric, 1e-4);
        }
    }

    #[test]
    fn rebuilt_tape_gives_bitwise_identical_gradients() {
        let mut rng = new_rng(23);
        let w: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let run = || {
            let mut tape = Tape::new();
            let wv = tape.leaf(&w, &[3, 4], true).unwrap();
            let xv = tape.leaf(&x, &[4, 2], true).unwrap();
            let p = tape.matmul(wv, xv).unwrap();
            let s = tape.tanh(p);
            let l = tape.mean_all(s);
            tape.backward(l).unwrap();
            (tape.grad(wv).unwrap().to_vec(), tape.grad(xv).unwrap().to_vec())
        };
        let (g1, g2) = (run(), run());
        assert_eq!(g1, g2);
    }

    #[test]
    fn straight_through_forwards_hard_and_backprops_soft() {
        let weights = [1.0, 2.0, 3.0];
        let hard = [0.0, 1.0, 0.0];
        let grad_with = |use_st: bool| {
            let mut tape = Tape::new();
            let logits = tape.leaf(&[0.2, 0.5, 0.3], &[1, 3], true).unwrap();
            let soft = tape.softmax(logits);
            let out = if use_st { tape.straight_through(soft, &hard).unwrap() } else { soft };
            let w = tape.leaf(&weights, &[1, 3], false).unwrap();
            let prod = tape.mul(out, w).unwrap();
            let s = tape.sum_all(prod);
            tape.backward(s).unwrap();
            (tape.value(out).to_vec(), tape.grad(logits).unwrap().to_vec())
        };
        let (st_value, st_grad) = grad_with(true);
        let (_, soft_grad) = grad_with(false);
        // Forward sees the hard one-hot; the gradient is the one the relaxed
        // sample would have received.
        assert_eq!(st_value, hard);
        assert_eq!(st_grad, soft_grad);
        assert!(st_grad.iter().any(|g| g.abs() > 1e-3));
    }

    #[test]
    fn scatter_accumulates_into_params() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::new(&[2], vec![1.0, 2.0], true).unwrap());
        params.zero_grad();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&params, id);
            let s = tape.sum_all(w);
            tape.backward(s).unwrap();
            tape.scatter_param_grads(&mut params).unwrap();
        }
        assert_eq!(params.get(id).grad.as_deref().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn scatter_without_zero_grad_is_usage_error() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::new(&[1], vec![1.0], true).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&params, id);
        let s = tape.sum_all(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.scatter_param_grads(&mut params), Err(Error::Usage(_))));
    }
}
