//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records a computation graph as operations are built; values are
//! computed eagerly and cached, and [`Tape::backward`] replays the tape in
//! reverse creation order (a topological order by construction) accumulating
//! vector-Jacobian products. The op set is the minimal closure needed for a
//! small multilayer perceptron with a softmax-of-advantage policy head:
//! add/sub/mul (with scalar broadcast), matrix–vector product, elementwise
//! exp/log/tanh/square, temperature softmax, weighted-sum-over-actions (dot),
//! mean, and the stop-gradient operator sg(·) whose forward value is the
//! identity and whose backward contribution is exactly zero.
//!
//! Gradients are always reported as flat vectors aligned with a
//! [`ParamVector`]: a fixed, ordered list of named parameter segments that
//! serves as the common coordinate system for every gradient comparison in
//! this crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("`log` input must be strictly positive, got {0}")]
    LogDomain(f64),
    #[error("non-finite value encountered in `{0}`")]
    NonFinite(&'static str),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

// ── Parameter vector ──

/// One named, shaped block of trainable parameters (e.g. a layer's weights).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSegment {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamSegment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "segment shape/value length mismatch"
        );
        Self { name: name.into(), shape, values }
    }
}

/// Flat, ordered view of all trainable parameters θ.
///
/// Flattening is a fixed bijection: segment order and per-segment row-major
/// order are deterministic across calls, so two gradients taken with respect
/// to the same `ParamVector` are comparable elementwise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    segments: Vec<ParamSegment>,
}

impl ParamVector {
    pub fn new(segments: Vec<ParamSegment>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &ParamSegment {
        &self.segments[idx]
    }

    /// Index of the segment named `name`, if present.
    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Overwrite one segment's values (shape unchanged).
    pub fn set_segment_values(&mut self, idx: usize, values: &[f64]) {
        assert_eq!(
            values.len(),
            self.segments[idx].values.len(),
            "segment value length mismatch"
        );
        self.segments[idx].values.copy_from_slice(values);
    }

    /// Count of scalar parameters across all segments.
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    /// Offset of segment `idx` within the flat vector.
    pub fn offset_of(&self, idx: usize) -> usize {
        self.segments[..idx].iter().map(|s| s.values.len()).sum()
    }

    /// All parameter values concatenated in segment order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for seg in &self.segments {
            out.extend_from_slice(&seg.values);
        }
        out
    }

    /// Overwrite all values from a flat vector (inverse of [`Self::to_flat`]).
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len(), "flat length mismatch");
        let mut at = 0;
        for seg in &mut self.segments {
            let n = seg.values.len();
            seg.values.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// In-place `θ += scale · delta` over the flat coordinate system.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.total_len(), "delta length mismatch");
        let mut at = 0;
        for seg in &mut self.segments {
            for v in &mut seg.values {
                *v += scale * delta[at];
                at += 1;
            }
        }
    }

    fn get_flat(&self, i: usize) -> f64 {
        let mut at = i;
        for seg in &self.segments {
            if at < seg.values.len() {
                return seg.values[at];
            }
            at -= seg.values.len();
        }
        panic!("flat index {i} out of range");
    }

    fn set_flat_at(&mut self, i: usize, v: f64) {
        let mut at = i;
        for seg in &mut self.segments {
            if at < seg.values.len() {
                seg.values[at] = v;
                return;
            }
            at -= seg.values.len();
        }
        panic!("flat index {i} out of range");
    }
}

// ── Tape and nodes ──

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    /// Leaf bound to a `ParamVector` segment index.
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (m×k) matrix times length-k vector.
    MatVec(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    /// softmax(x/τ) over a vector; τ stored alongside.
    SoftmaxTau(NodeId, f64),
    /// Weighted sum over actions: Σᵢ aᵢ·bᵢ (scalar output).
    Dot(NodeId, NodeId),
    Mean(NodeId),
    /// Forward identity, backward zero. The source node is dropped on
    /// purpose: no gradient ever flows through, so the edge is not recorded.
    StopGrad,
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Wengert-list computation graph: nodes are appended in evaluation order, so
/// the list itself is a topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    forwarded: bool,
}

fn is_scalar(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> NodeId {
        self.nodes.push(Node { value, shape, op });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    // ── Leaves ──

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(values, shape, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![v], vec![1], Op::Constant)
    }

    /// Leaf carrying the current values of `params.segment(seg)`; backward
    /// accumulates this node's gradient into that segment's flat slots.
    pub fn param(&mut self, params: &ParamVector, seg: usize) -> NodeId {
        let s = params.segment(seg);
        self.push(s.values.clone(), s.shape.clone(), Op::Param(seg))
    }

    // ── Elementwise and reduction ops ──

    fn binary_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape == nb.shape {
            Ok(na.shape.clone())
        } else if is_scalar(&na.shape) {
            Ok(nb.shape.clone())
        } else if is_scalar(&nb.shape) {
            Ok(na.shape.clone())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            })
        }
    }

    /// Elementwise addition; either operand may be a scalar (broadcast).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("add", a, b)?;
        let v = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(v, shape, Op::Add(a, b)))
    }

    /// Elementwise subtraction; either operand may be a scalar (broadcast).
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("sub", a, b)?;
        let v = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(v, shape, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product; either operand may be a scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("mul", a, b)?;
        let v = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(v, shape, Op::Mul(a, b)))
    }

    /// Matrix–vector product: `m` of shape (rows, cols) times `x` of shape (cols,).
    pub fn matmul(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let (nm, nx) = (self.node(m)?, self.node(x)?);
        let ok = nm.shape.len() == 2 && nx.shape.len() == 1 && nm.shape[1] == nx.shape[0];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: nm.shape.clone(),
                rhs: nx.shape.clone(),
            });
        }
        let (rows, cols) = (nm.shape[0], nm.shape[1]);
        let mut v = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += nm.value[r * cols + c] * nx.value[c];
            }
            v[r] = acc;
        }
        Ok(self.push(v, vec![rows], Op::MatVec(m, x)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        let (v, shape) = (n.value.iter().map(|x| x.exp()).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Exp(a)))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        if let Some(&bad) = n.value.iter().find(|x| **x <= 0.0) {
            return Err(AutodiffError::LogDomain(bad));
        }
        let (v, shape) = (n.value.iter().map(|x| x.ln()).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        let (v, shape) = (n.value.iter().map(|x| x.tanh()).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Tanh(a)))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        let (v, shape) = (n.value.iter().map(|x| x * x).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Square(a)))
    }

    /// softmax(x/τ) over a vector, computed with max-subtraction for overflow
    /// safety (invisible to values and gradients).
    pub fn softmax_tau(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        let n = self.node(a)?;
        if n.shape.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_tau",
                lhs: n.shape.clone(),
                rhs: vec![],
            });
        }
        let v = softmax_stable(&n.value, tau);
        let shape = n.shape.clone();
        Ok(self.push(v, shape, Op::SoftmaxTau(a, tau)))
    }

    /// Weighted sum over actions: Σᵢ aᵢ·bᵢ, a scalar. Selecting one component
    /// is the special case where one operand is a one-hot constant.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let v = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(x, y)| x * y)
            .sum::<f64>();
        Ok(self.push(vec![v], vec![1], Op::Dot(a, b)))
    }

    /// Extract component `idx` of a vector as a scalar node.
    pub fn select(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let n = self.node(a)?;
        let len = n.value.len();
        if idx >= len {
            return Err(AutodiffError::ShapeMismatch {
                op: "select",
                lhs: n.shape.clone(),
                rhs: vec![idx],
            });
        }
        let mut onehot = vec![0.0; len];
        onehot[idx] = 1.0;
        let shape = n.shape.clone();
        let hot = self.constant(onehot, shape);
        self.dot(a, hot)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        let len = n.value.len() as f64;
        let v = n.value.iter().sum::<f64>() / len;
        Ok(self.push(vec![v], vec![1], Op::Mean(a)))
    }

    /// Stop gradient: forward value is `a`'s value exactly; backward
    /// propagates zero into `a`.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        let (v, shape) = (n.value.clone(), n.shape.clone());
        Ok(self.push(v, shape, Op::StopGrad))
    }

    // ── Forward / backward ──

    /// Values are computed eagerly as nodes are built; `forward` validates the
    /// root, marks the tape ready for backward, and returns the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<Vec<f64>> {
        let v = self.node(root)?.value.clone();
        self.forwarded = true;
        Ok(v)
    }

    /// Reverse sweep from a scalar `root`; returns droot/dθ as a flat vector
    /// aligned with `params` order. Children of stop-gradient nodes receive
    /// exactly zero.
    pub fn backward(&self, root: NodeId, params: &ParamVector) -> Result<Vec<f64>> {
        if !self.forwarded {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let root_node = self.node(root)?;
        if !is_scalar(&root_node.shape) {
            return Err(AutodiffError::NonScalarRoot(root_node.shape.clone()));
        }

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|x| *x == 0.0) {
                grads[i] = g;
                continue;
            }
            match self.nodes[i].op {
                Op::Constant | Op::Param(_) => {}
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut grads[a.0], &g, 1.0);
                    accumulate_broadcast(&mut grads[b.0], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut grads[a.0], &g, 1.0);
                    accumulate_broadcast(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let gb: Vec<f64> =
                        broadcast_zip(&g, &self.nodes[b.0].value, |gi, bi| gi * bi);
                    accumulate_broadcast(&mut grads[a.0], &gb, 1.0);
                    let ga: Vec<f64> =
                        broadcast_zip(&g, &self.nodes[a.0].value, |gi, ai| gi * ai);
                    accumulate_broadcast(&mut grads[b.0], &ga, 1.0);
                }
                Op::MatVec(m, x) => {
                    let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    for r in 0..rows {
                        for c in 0..cols {
                            grads[m.0][r * cols + c] += g[r] * self.nodes[x.0].value[c];
                        }
                    }
                    for c in 0..cols {
                        let mut acc = 0.0;
                        for r in 0..rows {
                            acc += self.nodes[m.0].value[r * cols + c] * g[r];
                        }
                        grads[x.0][c] += acc;
                    }
                }
                Op::Exp(a) => {
                    for (ga, (gi, yi)) in
                        grads[a.0].iter_mut().zip(g.iter().zip(&self.nodes[i].value))
                    {
                        *ga += gi * yi;
                    }
                }
                Op::Log(a) => {
                    for (k, ga) in grads[a.0].iter_mut().enumerate() {
                        *ga += g[k] / self.nodes[a.0].value[k];
                    }
                }
                Op::Tanh(a) => {
                    for (k, ga) in grads[a.0].iter_mut().enumerate() {
                        let y = self.nodes[i].value[k];
                        *ga += g[k] * (1.0 - y * y);
                    }
                }
                Op::Square(a) => {
                    for (k, ga) in grads[a.0].iter_mut().enumerate() {
                        *ga += g[k] * 2.0 * self.nodes[a.0].value[k];
                    }
                }
                Op::SoftmaxTau(a, tau) => {
                    // y = softmax(x/τ): dx = y ∘ (g − ⟨g, y⟩) / τ
                    let y = &self.nodes[i].value;
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for (k, ga) in grads[a.0].iter_mut().enumerate() {
                        *ga += y[k] * (g[k] - gy) / tau;
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    for (k, ga) in grads[a.0].iter_mut().enumerate() {
                        *ga += s * self.nodes[b.0].value[k];
                    }
                    for (k, gb) in grads[b.0].iter_mut().enumerate() {
                        *gb += s * self.nodes[a.0].value[k];
                    }
                }
                Op::Mean(a) => {
                    let s = g[0] / self.nodes[a.0].value.len() as f64;
                    for ga in grads[a.0].iter_mut() {
                        *ga += s;
                    }
                }
                Op::StopGrad => {}
            }
            grads[i] = g;
        }

        // Gather parameter-leaf gradients into the flat coordinate system.
        let mut flat = vec![0.0; params.total_len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(seg) = node.op {
                let off = params.offset_of(seg);
                for (k, gk) in grads[i].iter().enumerate() {
                    flat[off + k] += gk;
                }
            }
        }
        Ok(flat)
    }
}

fn broadcast_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (1, _) => b.iter().map(|y| f(a[0], *y)).collect(),
        (_, 1) if a.len() != 1 => a.iter().map(|x| f(*x, b[0])).collect(),
        _ => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
    }
}

/// `dst += scale · src`, summing `src` when `dst` is a broadcast scalar slot.
fn accumulate_broadcast(dst: &mut [f64], src: &[f64], scale: f64) {
    if dst.len() == src.len() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    } else if dst.len() == 1 {
        dst[0] += scale * src.iter().sum::<f64>();
    } else {
        // dst longer than src can only mean src is a broadcast scalar grad
        for d in dst.iter_mut() {
            *d += scale * src[0];
        }
    }
}

/// Numerically stable softmax(x/τ) with max-subtraction.
pub fn softmax_stable(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

// ── Finite differences ──

/// Central-difference gradient (f(θ+δeᵢ) − f(θ−δeᵢ))/(2δ) per coordinate: the
/// independent oracle every analytic gradient in this crate is checked against.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamVector, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamVector) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let n = params.total_len();
    let mut grad = vec![0.0; n];
    let mut work = params.clone();
    for i in 0..n {
        let orig = work.get_flat(i);
        work.set_flat_at(i, orig + step);
        let up = f(&work);
        work.set_flat_at(i, orig - step);
        let down = f(&work);
        work.set_flat_at(i, orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFinite("finite_diff_grad"));
        }
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}
