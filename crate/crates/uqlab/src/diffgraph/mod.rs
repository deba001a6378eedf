//! Minimal reverse-mode differentiation over scalar-valued losses.
//!
//! A [`Graph`] is an immutable, topologically ordered list of operation
//! records built through [`GraphBuilder`]. Evaluation allocates a per-call
//! cache of node values, so one graph can be evaluated concurrently from
//! several threads. The op set is the minimal closure needed for the
//! networks, losses and attack gradients in this crate: affine maps, ReLU,
//! sine, softmax / log (for ensemble-mean attack losses), fused softmax and
//! sigmoid cross-entropy, elementwise add / multiply, sum and L2 norm.
//!
//! All arithmetic is `f64`; non-finite intermediates are hard errors and
//! identify the offending node.

mod tensor;

pub use tensor::{Tensor, TensorError};

use ndarray::ArrayView2;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("input '{0}' declared in the graph but not bound")]
    UnboundInput(String),
    #[error("bound input '{name}' has shape {actual:?}, graph declares {expected:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input name '{0}' declared twice")]
    DuplicateInput(String),
    #[error("'{0}' is not a declared graph input")]
    UnknownInput(String),
    #[error("graph output has shape {0:?}; gradients require a scalar output")]
    NonScalarOutput(Vec<usize>),
    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Const(Tensor),
    /// y = W x + b, with the bias broadcast over batch columns.
    Affine { w: NodeId, x: NodeId, b: NodeId },
    Relu(NodeId),
    Sin(NodeId),
    Log(NodeId),
    /// Column-wise softmax with max-subtraction stabilisation.
    Softmax(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Sum of all elements; output is a scalar.
    Sum(NodeId),
    /// Column-wise Euclidean norm; `[k]` -> `[1]`, `[k,n]` -> `[1,n]`.
    L2Norm(NodeId),
    /// Summed softmax cross-entropy over batch columns against fixed labels.
    SoftmaxXent { logits: NodeId, labels: Vec<usize> },
    /// Summed sigmoid cross-entropy; logits have a single row.
    SigmoidXent { logits: NodeId, labels: Vec<u8> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Immutable computation graph. Build with [`GraphBuilder`].
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    output: NodeId,
}

/// Incrementally builds a [`Graph`]; shape errors surface at build time.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_names: Vec<String>,
}

fn cols_of(shape: &[usize]) -> usize {
    if shape.len() > 1 {
        shape[1]
    } else {
        1
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn mismatch(&self, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes.len(),
            detail,
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        if self.input_names.iter().any(|n| n == name) {
            return Err(GraphError::DuplicateInput(name.to_string()));
        }
        self.input_names.push(name.to_string());
        Ok(self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape.to_vec(),
        ))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (ws, xs, bs) = (
            self.shape(w).to_vec(),
            self.shape(x).to_vec(),
            self.shape(b).to_vec(),
        );
        if ws.len() != 2 {
            return Err(self.mismatch(format!("affine weight must be rank 2, got {ws:?}")));
        }
        let (m, k) = (ws[0], ws[1]);
        if xs[0] != k {
            return Err(self.mismatch(format!("affine: W is {ws:?} but x is {xs:?}")));
        }
        if bs != [m] {
            return Err(self.mismatch(format!("affine: bias {bs:?} must be [{m}]")));
        }
        let out = if xs.len() > 1 { vec![m, xs[1]] } else { vec![m] };
        Ok(self.push(Op::Affine { w, x, b }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu(x), s)
    }

    pub fn sine(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Sin(x), s)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Log(x), s)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Softmax(x), s)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.shape(a) != self.shape(b) {
            let d = format!(
                "add: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            );
            return Err(self.mismatch(d));
        }
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.shape(a) != self.shape(b) {
            let d = format!(
                "mul: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            );
            return Err(self.mismatch(d));
        }
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let out = if s.len() > 1 { vec![1, s[1]] } else { vec![1] };
        self.push(Op::L2Norm(x), out)
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, GraphError> {
        let s = self.shape(logits).to_vec();
        let (k, n) = (s[0], cols_of(&s));
        if labels.len() != n {
            return Err(self.mismatch(format!(
                "softmax_xent: {} labels for {} batch columns",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(self.mismatch(format!("softmax_xent: label {bad} out of range for K={k}")));
        }
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
        ))
    }

    pub fn sigmoid_xent(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId, GraphError> {
        let s = self.shape(logits).to_vec();
        if s[0] != 1 {
            return Err(self.mismatch(format!("sigmoid_xent: logits must have one row, got {s:?}")));
        }
        if labels.len() != cols_of(&s) {
            return Err(self.mismatch(format!(
                "sigmoid_xent: {} labels for {} batch columns",
                labels.len(),
                cols_of(&s)
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(self.mismatch("sigmoid_xent: labels must be 0 or 1".to_string()));
        }
        Ok(self.push(
            Op::SigmoidXent {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
        ))
    }

    pub fn finish(self, output: NodeId) -> Graph {
        assert!(output.0 < self.nodes.len());
        Graph {
            nodes: self.nodes,
            output,
        }
    }
}

fn matmul(a: &[f64], am: usize, ak: usize, b: &[f64], bk: usize, bn: usize) -> Vec<f64> {
    debug_assert_eq!(ak, bk);
    let av = ArrayView2::from_shape((am, ak), a).unwrap();
    let bv = ArrayView2::from_shape((bk, bn), b).unwrap();
    av.dot(&bv).iter().copied().collect()
}

fn matmul_at_b(a: &[f64], am: usize, ak: usize, b: &[f64], bn: usize) -> Vec<f64> {
    // A^T (ak x am) . B (am x bn)
    let av = ArrayView2::from_shape((am, ak), a).unwrap();
    let bv = ArrayView2::from_shape((am, bn), b).unwrap();
    av.t().dot(&bv).iter().copied().collect()
}

fn matmul_a_bt(a: &[f64], am: usize, an: usize, b: &[f64], bm: usize) -> Vec<f64> {
    // A (am x an) . B^T (an x bm) with B stored (bm x an)
    let av = ArrayView2::from_shape((am, an), a).unwrap();
    let bv = ArrayView2::from_shape((bm, an), b).unwrap();
    av.dot(&bv.t()).iter().copied().collect()
}

/// Column-wise stabilised softmax, in place over `values` of shape `k x n`.
fn softmax_cols(values: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            max = max.max(values[i * n + j]);
        }
        let mut denom = 0.0;
        for i in 0..k {
            let e = (values[i * n + j] - max).exp();
            out[i * n + j] = e;
            denom += e;
        }
        for i in 0..k {
            out[i * n + j] /= denom;
        }
    }
    out
}

fn log_sum_exp_col(values: &[f64], k: usize, n: usize, j: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for i in 0..k {
        max = max.max(values[i * n + j]);
    }
    let mut s = 0.0;
    for i in 0..k {
        s += (values[i * n + j] - max).exp();
    }
    max + s.ln()
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    pub fn input_shape(&self, name: &str) -> Option<&[usize]> {
        self.nodes.iter().find_map(|n| match &n.op {
            Op::Input { name: m } if m == name => Some(n.shape.as_slice()),
            _ => None,
        })
    }

    fn forward_cache(&self, inputs: &HashMap<String, Tensor>) -> Result<Vec<Tensor>, GraphError> {
        let mut cache: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::Input { name } => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GraphError::InputShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            actual: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                Op::Affine { w, x, b } => {
                    let (wt, xt, bt) = (&cache[w.0], &cache[x.0], &cache[b.0]);
                    let (m, k, n) = (wt.rows(), wt.cols(), xt.cols());
                    let mut vals = matmul(wt.values(), m, k, xt.values(), k, n);
                    for i in 0..m {
                        for j in 0..n {
                            vals[i * n + j] += bt.values()[i];
                        }
                    }
                    Tensor::from_parts(node.shape.clone(), vals)
                    .checked(idx, "affine")?
                }
                Op::Relu(p) => cache[p.0]
                    .map(idx, "relu", |v| v.max(0.0))?,
                Op::Sin(p) => cache[p.0].map(idx, "sin", f64::sin)?,
                Op::Log(p) => cache[p.0].map(idx, "log", f64::ln)?,
                Op::Softmax(p) => {
                    let t = &cache[p.0];
                    Tensor::from_parts(node.shape.clone(), softmax_cols(t.values(), t.rows(), t.cols()))
                    .checked(idx, "softmax")?
                }
                Op::Add(a, b) => {
                    let (at, bt) = (&cache[a.0], &cache[b.0]);
                    let vals = at
                        .values()
                        .iter()
                        .zip(bt.values())
                        .map(|(x, y)| x + y)
                        .collect();
                    Tensor::from_parts(node.shape.clone(), vals)
                    .checked(idx, "add")?
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (&cache[a.0], &cache[b.0]);
                    let vals = at
                        .values()
                        .iter()
                        .zip(bt.values())
                        .map(|(x, y)| x * y)
                        .collect();
                    Tensor::from_parts(node.shape.clone(), vals)
                    .checked(idx, "mul")?
                }
                Op::Sum(p) => Tensor::scalar(cache[p.0].values().iter().sum())
                    .checked(idx, "sum")?,
                Op::L2Norm(p) => {
                    let t = &cache[p.0];
                    let (k, n) = (t.rows(), t.cols());
                    let mut vals = vec![0.0; n];
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..k {
                            let v = t.values()[i * n + j];
                            s += v * v;
                        }
                        vals[j] = s.sqrt();
                    }
                    Tensor::from_parts(node.shape.clone(), vals)
                    .checked(idx, "l2_norm")?
                }
                Op::SoftmaxXent { logits, labels } => {
                    let t = &cache[logits.0];
                    let (k, n) = (t.rows(), t.cols());
                    let mut loss = 0.0;
                    for (j, &label) in labels.iter().enumerate() {
                        loss += log_sum_exp_col(t.values(), k, n, j) - t.values()[label * n + j];
                    }
                    Tensor::scalar(loss).checked(idx, "softmax_xent")?
                }
                Op::SigmoidXent { logits, labels } => {
                    let t = &cache[logits.0];
                    let mut loss = 0.0;
                    for (j, &label) in labels.iter().enumerate() {
                        let z = t.values()[j];
                        // log(1 + e^z) - y z, computed stably
                        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - f64::from(label) * z;
                    }
                    Tensor::scalar(loss).checked(idx, "sigmoid_xent")?
                }
            };
            cache.push(out);
        }
        Ok(cache)
    }

    /// Evaluate the graph output for the given named inputs.
    pub fn eval_forward(&self, inputs: &HashMap<String, Tensor>) -> Result<Tensor, GraphError> {
        let cache = self.forward_cache(inputs)?;
        Ok(cache[self.output.0].clone())
    }

    /// Gradient of the scalar output with respect to the input named `wrt`.
    pub fn grad(
        &self,
        inputs: &HashMap<String, Tensor>,
        wrt: &str,
    ) -> Result<Tensor, GraphError> {
        if self.output_shape() != [1] {
            return Err(GraphError::NonScalarOutput(self.output_shape().to_vec()));
        }
        let wrt_id = self
            .nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input { name } if name == wrt))
            .ok_or_else(|| GraphError::UnknownInput(wrt.to_string()))?;

        let cache = self.forward_cache(inputs)?;
        let mut adjoint = self.backward(&cache);

        Ok(adjoint[wrt_id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[wrt_id].shape)))
    }

    /// Scalar output together with the gradient for every named input, from
    /// a single forward/backward sweep.
    pub fn eval_with_grads(
        &self,
        inputs: &HashMap<String, Tensor>,
    ) -> Result<(f64, HashMap<String, Tensor>), GraphError> {
        if self.output_shape() != [1] {
            return Err(GraphError::NonScalarOutput(self.output_shape().to_vec()));
        }
        let cache = self.forward_cache(inputs)?;
        let value = cache[self.output.0].as_scalar();
        let mut adjoint = self.backward(&cache);
        let mut grads = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name } = &node.op {
                let g = adjoint[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                grads.insert(name.clone(), g);
            }
        }
        Ok((value, grads))
    }

    fn backward(&self, cache: &[Tensor]) -> Vec<Option<Tensor>> {
        let mut adjoint: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoint[self.output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let dy = match adjoint[idx].take() {
                Some(t) => t,
                None => continue,
            };
            let node = &self.nodes[idx];
            let push = |adj: &mut Vec<Option<Tensor>>, id: NodeId, contrib: Tensor| {
                match &mut adj[id.0] {
                    Some(existing) => {
                        for (e, c) in existing.values_mut().iter_mut().zip(contrib.values()) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Input { .. } | Op::Const(_) => {
                    if matches!(&node.op, Op::Input { .. }) {
                        adjoint[idx] = Some(dy);
                        continue;
                    }
                }
                Op::Affine { w, x, b } => {
                    let (wt, xt) = (&cache[w.0], &cache[x.0]);
                    let (m, k, n) = (wt.rows(), wt.cols(), xt.cols());
                    let dw = matmul_a_bt(dy.values(), m, n, xt.values(), k);
                    let dx = matmul_at_b(wt.values(), m, k, dy.values(), n);
                    let mut db = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            db[i] += dy.values()[i * n + j];
                        }
                    }
                    push(&mut adjoint, *w, Tensor::from_parts(wt.shape().to_vec(), dw ));
                    push(&mut adjoint, *x, Tensor::from_parts(xt.shape().to_vec(), dx ));
                    push(&mut adjoint, *b, Tensor::from_parts(vec![m], db));
                }
                Op::Relu(p) => {
                    let xt = &cache[p.0];
                    let vals = xt
                        .values()
                        .iter()
                        .zip(dy.values())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    push(&mut adjoint, *p, Tensor::from_parts(xt.shape().to_vec(), vals));
                }
                Op::Sin(p) => {
                    let xt = &cache[p.0];
                    let vals = xt
                        .values()
                        .iter()
                        .zip(dy.values())
                        .map(|(&x, &g)| g * x.cos())
                        .collect();
                    push(&mut adjoint, *p, Tensor::from_parts(xt.shape().to_vec(), vals));
                }
                Op::Log(p) => {
                    let xt = &cache[p.0];
                    let vals = xt
                        .values()
                        .iter()
                        .zip(dy.values())
                        .map(|(&x, &g)| g / x)
                        .collect();
                    push(&mut adjoint, *p, Tensor::from_parts(xt.shape().to_vec(), vals));
                }
                Op::Softmax(p) => {
                    let yt = &cache[idx];
                    let (k, n) = (yt.rows(), yt.cols());
                    let mut vals = vec![0.0; yt.len()];
                    for j in 0..n {
                        let mut dot = 0.0;
                        for i in 0..k {
                            dot += dy.values()[i * n + j] * yt.values()[i * n + j];
                        }
                        for i in 0..k {
                            vals[i * n + j] =
                                yt.values()[i * n + j] * (dy.values()[i * n + j] - dot);
                        }
                    }
                    push(&mut adjoint, *p, Tensor::from_parts(yt.shape().to_vec(), vals));
                }
                Op::Add(a, b) => {
                    push(&mut adjoint, *a, dy.clone());
                    push(&mut adjoint, *b, dy);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (&cache[a.0], &cache[b.0]);
                    let da = bt
                        .values()
                        .iter()
                        .zip(dy.values())
                        .map(|(&x, &g)| g * x)
                        .collect();
                    let db = at
                        .values()
                        .iter()
                        .zip(dy.values())
                        .map(|(&x, &g)| g * x)
                        .collect();
                    push(&mut adjoint, *a, Tensor::from_parts(at.shape().to_vec(), da ));
                    push(&mut adjoint, *b, Tensor::from_parts(bt.shape().to_vec(), db));
                }
                Op::Sum(p) => {
                    let xt = &cache[p.0];
                    let g = dy.as_scalar();
                    push(
                        &mut adjoint,
                        *p,
                        Tensor::from_parts(xt.shape().to_vec(), vec![g; xt.len()] ),
                    );
                }
                Op::L2Norm(p) => {
                    let xt = &cache[p.0];
                    let yt = &cache[idx];
                    let (k, n) = (xt.rows(), xt.cols());
                    let mut vals = vec![0.0; xt.len()];
                    for j in 0..n {
                        let norm = yt.values()[j];
                        if norm > 0.0 {
                            let g = dy.values()[j] / norm;
                            for i in 0..k {
                                vals[i * n + j] = g * xt.values()[i * n + j];
                            }
                        }
                    }
                    push(&mut adjoint, *p, Tensor::from_parts(xt.shape().to_vec(), vals));
                }
                Op::SoftmaxXent { logits, labels } => {
                    let t = &cache[logits.0];
                    let (k, n) = (t.rows(), t.cols());
                    let g = dy.as_scalar();
                    let mut vals = softmax_cols(t.values(), k, n);
                    for (j, &label) in labels.iter().enumerate() {
                        vals[label * n + j] -= 1.0;
                    }
                    for v in &mut vals {
                        *v *= g;
                    }
                    push(&mut adjoint, *logits, Tensor::from_parts(t.shape().to_vec(), vals));
                }
                Op::SigmoidXent { logits, labels } => {
                    let t = &cache[logits.0];
                    let g = dy.as_scalar();
                    let vals = t
                        .values()
                        .iter()
                        .zip(labels.iter())
                        .map(|(&z, &y)| g * (1.0 / (1.0 + (-z).exp()) - f64::from(y)))
                        .collect();
                    push(&mut adjoint, *logits, Tensor::from_parts(t.shape().to_vec(), vals));
                }
            }
        }

        adjoint
    }

    /// Max over coordinates of the relative disagreement between the analytic
    /// gradient and a central finite difference with the given step.
    pub fn finite_diff_check(
        &self,
        inputs: &HashMap<String, Tensor>,
        wrt: &str,
        step: f64,
    ) -> Result<f64, GraphError> {
        if step <= 0.0 {
            return Err(GraphError::NonPositiveStep(step));
        }
        let analytic = self.grad(inputs, wrt)?;
        let base = inputs
            .get(wrt)
            .ok_or_else(|| GraphError::UnboundInput(wrt.to_string()))?;
        let mut worst = 0.0f64;
        let mut perturbed = inputs.clone();
        for i in 0..base.len() {
            let mut t = base.clone();
            t.values_mut()[i] += step;
            perturbed.insert(wrt.to_string(), t);
            let plus = self.eval_forward(&perturbed)?.as_scalar();
            let mut t = base.clone();
            t.values_mut()[i] -= step;
            perturbed.insert(wrt.to_string(), t);
            let minus = self.eval_forward(&perturbed)?.as_scalar();
            let central = (plus - minus) / (2.0 * step);
            let a = analytic.values()[i];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

// Tensor helpers private to graph evaluation.
impl Tensor {
    fn checked(self, node: usize, op: &'static str) -> Result<Self, GraphError> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(GraphError::NonFinite { node, op })
        }
    }

    fn map(
        &self,
        node: usize,
        op: &'static str,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self, GraphError> {
        Tensor::from_parts(self.shape().to_vec(), self.values().iter().map(|&v| f(v)).collect())
        .checked(node, op)
    }
}
