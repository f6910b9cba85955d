//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every example. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! the backward pass is a single reverse sweep. Parameter leaves borrow
//! their values from a [`ParamSet`] instead of copying them.

use super::ops;
use super::tensor::{Gradients, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Sigmoid(NodeId),
    Tanh(NodeId),
    VecMat { x: NodeId, m: NodeId },
    MatVec { m: NodeId, x: NodeId },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    StackRows(Vec<NodeId>),
    Row { m: NodeId, index: usize },
    Softmax(NodeId),
    Sum(NodeId),
    NegLogMarginal { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Recording of primitive operations over one forward pass.
pub struct Graph<'p> {
    params: &'p ParamSet,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.get(p).values(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn size(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape.iter().product()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, inputs: &[NodeId]) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let value = t.values().to_vec();
        self.nodes.push(Node {
            op: Op::Constant,
            shape,
            value,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn vector(&mut self, values: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(values))
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            op: Op::Param(id),
            shape,
            value: Vec::new(),
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn same_size(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<usize> {
        let (na, nb) = (self.size(a), self.size(b));
        if na != nb {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(na)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_size(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, value, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Affine { x, scale }, shape, value, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).iter().map(|&v| ops::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid(x), shape, value, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh(x), shape, value, &[x])
    }

    /// Row vector times matrix: `xᵀ M` with `x: n`, `M: n × k`.
    pub fn vecmat(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let ms = self.shape(m);
        if ms.len() != 2 || ms[0] != self.size(x) {
            return Err(Error::shape(
                "vecmat",
                format!("x {:?} · M {:?}", self.shape(x), ms),
            ));
        }
        let (n, k) = (ms[0], ms[1]);
        let xv = self.value(x);
        let mv = self.value(m);
        let mut out = vec![0.0; k];
        for i in 0..n {
            let xi = xv[i];
            if xi == 0.0 {
                continue;
            }
            let row = &mv[i * k..(i + 1) * k];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(self.push(Op::VecMat { x, m }, vec![k], out, &[x, m]))
    }

    /// Matrix times column vector: `M x` with `M: n × k`, `x: k`.
    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let ms = self.shape(m);
        if ms.len() != 2 || ms[1] != self.size(x) {
            return Err(Error::shape(
                "matvec",
                format!("M {:?} · x {:?}", ms, self.shape(x)),
            ));
        }
        let (n, k) = (ms[0], ms[1]);
        let xv = self.value(x);
        let mv = self.value(m);
        let out = (0..n)
            .map(|i| ops::dot(&mv[i * k..(i + 1) * k], xv))
            .collect();
        Ok(self.push(Op::MatVec { m, x }, vec![n], out, &[m, x]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let n = value.len();
        self.push(Op::Concat(parts.to_vec()), vec![n], value, parts)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if len == 0 || start + len > self.size(x) {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of {:?}", start + len, self.shape(x)),
            ));
        }
        let value = self.value(x)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, vec![len], value, &[x]))
    }

    /// Stacks equal-length vectors into a `rows × width` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no rows"));
        };
        let width = self.size(first);
        let mut value = Vec::with_capacity(width * rows.len());
        for &r in rows {
            if self.size(r) != width {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row width {} vs {width}", self.size(r)),
                ));
            }
            value.extend_from_slice(self.value(r));
        }
        Ok(self.push(
            Op::StackRows(rows.to_vec()),
            vec![rows.len(), width],
            value,
            rows,
        ))
    }

    /// Row `index` of a matrix node (embedding lookup).
    pub fn row(&mut self, m: NodeId, index: usize) -> Result<NodeId> {
        let ms = self.shape(m);
        if ms.len() != 2 || index >= ms[0] {
            return Err(Error::shape("row", format!("row {index} of {ms:?}")));
        }
        let k = ms[1];
        let value = self.value(m)[index * k..(index + 1) * k].to_vec();
        Ok(self.push(Op::Row { m, index }, vec![k], value, &[m]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::softmax(self.value(x))?;
        let n = value.len();
        Ok(self.push(Op::Softmax(x), vec![n], value, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], &[x])
    }

    /// `−log Σ_{t ∈ targets} softmax(logits)_t`, computed in log-space.
    pub fn neg_log_marginal(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let n = self.size(logits);
        let mut targets = targets.to_vec();
        targets.sort_unstable();
        targets.dedup();
        if targets.is_empty() || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape(
                "neg_log_marginal",
                format!("targets {targets:?} for {n} logits"),
            ));
        }
        let v = self.value(logits);
        ops::check_finite("neg_log_marginal", v)?;
        let all = ops::log_sum_exp(v);
        let picked: Vec<f64> = targets.iter().map(|&t| v[t]).collect();
        let loss = all - ops::log_sum_exp(&picked);
        Ok(self.push(
            Op::NegLogMarginal { logits, targets },
            vec![1],
            vec![loss],
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameters the loss does not
    /// reach get all-zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.size(loss) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, &g));
                    self.accumulate(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, &g));
                    self.accumulate(&mut grads, *b, |d| {
                        for (x, gi) in d.iter_mut().zip(&g) {
                            *x -= gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * vb[i];
                        }
                    });
                    self.accumulate(&mut grads, *b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * va[i];
                        }
                    });
                }
                Op::Affine { x, scale } => {
                    self.accumulate(&mut grads, *x, |d| {
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di += scale * gi;
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    self.accumulate(&mut grads, *x, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    self.accumulate(&mut grads, *x, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::VecMat { x, m } => {
                    let k = g.len();
                    let (xv, mv) = (self.value(*x), self.value(*m));
                    self.accumulate(&mut grads, *x, |d| {
                        for (i, di) in d.iter_mut().enumerate() {
                            *di += ops::dot(&mv[i * k..(i + 1) * k], &g);
                        }
                    });
                    self.accumulate(&mut grads, *m, |d| {
                        for (i, &xi) in xv.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (dj, gj) in d[i * k..(i + 1) * k].iter_mut().zip(&g) {
                                *dj += xi * gj;
                            }
                        }
                    });
                }
                Op::MatVec { m, x } => {
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    let k = xv.len();
                    self.accumulate(&mut grads, *m, |d| {
                        for (i, &gi) in g.iter().enumerate() {
                            if gi == 0.0 {
                                continue;
                            }
                            for (dj, xj) in d[i * k..(i + 1) * k].iter_mut().zip(xv) {
                                *dj += gi * xj;
                            }
                        }
                    });
                    self.accumulate(&mut grads, *x, |d| {
                        for (i, &gi) in g.iter().enumerate() {
                            for (dj, mj) in d.iter_mut().zip(&mv[i * k..(i + 1) * k]) {
                                *dj += gi * mj;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.size(p);
                        self.accumulate(&mut grads, p, |d| add_into(d, &g[offset..offset + n]));
                        offset += n;
                    }
                }
                Op::Slice { x, start } => {
                    self.accumulate(&mut grads, *x, |d| {
                        add_into(&mut d[*start..*start + g.len()], &g)
                    });
                }
                Op::StackRows(rows) => {
                    let width = node.shape[1];
                    for (r, &row) in rows.iter().enumerate() {
                        self.accumulate(&mut grads, row, |d| {
                            add_into(d, &g[r * width..(r + 1) * width])
                        });
                    }
                }
                Op::Row { m, index } => {
                    let k = g.len();
                    self.accumulate(&mut grads, *m, |d| {
                        add_into(&mut d[index * k..(index + 1) * k], &g)
                    });
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let dot = ops::dot(y, &g);
                    self.accumulate(&mut grads, *x, |d| {
                        for i in 0..d.len() {
                            d[i] += y[i] * (g[i] - dot);
                        }
                    });
                }
                Op::Sum(x) => {
                    self.accumulate(&mut grads, *x, |d| {
                        for di in d.iter_mut() {
                            *di += g[0];
                        }
                    });
                }
                Op::NegLogMarginal { logits, targets } => {
                    let v = self.value(*logits);
                    let p = ops::softmax(v)?;
                    let picked: Vec<f64> = targets.iter().map(|&t| v[t]).collect();
                    let q = ops::softmax(&picked)?;
                    self.accumulate(&mut grads, *logits, |d| {
                        for (di, pi) in d.iter_mut().zip(&p) {
                            *di += g[0] * pi;
                        }
                        for (&t, qi) in targets.iter().zip(&q) {
                            d[t] -= g[0] * qi;
                        }
                    });
                }
            }
        }

        let mut out = Gradients::zeros_like(self.params);
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                if let Some(Some(g)) = grads.get(n.0) {
                    out.0[pid].copy_from_slice(g);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.size(target)]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::finite_diff_check;

    fn single(name: &str, t: Tensor) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add(name, t);
        (ps, id)
    }

    #[test]
    fn identity_matvec_sum_gives_ones() {
        let mut ps = ParamSet::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = ps.add("W", Tensor::new(vec![3, 3], eye).unwrap());
        let x = ps.add("x", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let mut g = Graph::new(&ps);
        let (wn, xn) = (g.param(w), g.param(x));
        let y = g.matvec(wn, xn).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let (ps, x) = single("x", Tensor::scalar(0.0));
        let mut g = Graph::new(&ps);
        let xn = g.param(x);
        let y = g.sigmoid(xn);
        let grads = g.backward(y).unwrap();
        assert!((g.scalar(y) - 0.5).abs() < 1e-15);
        assert!((grads.get(x)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (ps, x) = single("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&ps);
        let xn = g.param(x);
        let y = g.tanh(xn);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = ps.add("b", Tensor::vector(vec![5.0]));
        let mut g = Graph::new(&ps);
        let an = g.param(a);
        let _bn = g.param(b);
        let loss = g.sum(an);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b), &[0.0]);
        assert_eq!(grads.get(a), &[1.0, 1.0]);
    }

    #[test]
    fn param_node_is_memoized() {
        let (ps, x) = single("x", Tensor::scalar(3.0));
        let mut g = Graph::new(&ps);
        let a = g.param(x);
        let b = g.param(x);
        assert_eq!(a, b);
        let sq = g.mul(a, b).unwrap();
        let grads = g.backward(sq).unwrap();
        assert!((grads.get(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn neg_log_marginal_matches_direct_formula() {
        let (ps, x) = single("x", Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]));
        let mut g = Graph::new(&ps);
        let xn = g.param(x);
        let l = g.neg_log_marginal(xn, &[1, 3, 3]).unwrap();
        let p = ops::softmax(&[0.5, -1.0, 2.0, 0.0]).unwrap();
        let expected = -(p[1] + p[3]).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    /// Random three-layer composition of matmul, tanh, softmax and a
    /// cross-entropy head, checked against central differences.
    #[test]
    fn composed_primitives_match_finite_differences() {
        use crate::numcore::rng::SeededRng;
        let mut rng = SeededRng::new(7, 0);
        let mut ps = ParamSet::new();
        let mut mat = |ps: &mut ParamSet, name: &str, r: usize, c: usize| {
            let v = (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
            ps.add(name, Tensor::new(vec![r, c], v).unwrap())
        };
        let w1 = mat(&mut ps, "w1", 4, 5);
        let w2 = mat(&mut ps, "w2", 5, 5);
        let w3 = mat(&mut ps, "w3", 5, 3);
        let x = mat(&mut ps, "x", 1, 4);
        let f = |ps: &ParamSet| -> Result<(f64, Gradients)> {
            let mut g = Graph::new(ps);
            let xn = g.param(x);
            let xr = g.row(xn, 0)?;
            let w1n = g.param(w1);
            let h1 = g.vecmat(xr, w1n)?;
            let h1 = g.tanh(h1);
            let w2n = g.param(w2);
            let h2 = g.vecmat(h1, w2n)?;
            let h2 = g.softmax(h2)?;
            let w3n = g.param(w3);
            let logits = g.vecmat(h2, w3n)?;
            let loss = g.neg_log_marginal(logits, &[2])?;
            Ok((g.scalar(loss), g.backward(loss)?))
        };
        let (_, grads) = f(&ps).unwrap();
        let report =
            finite_diff_check(&ps, &grads, |p| f(p).map(|r| r.0), 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.worst_relative_error() <= 1e-4);
    }
}
