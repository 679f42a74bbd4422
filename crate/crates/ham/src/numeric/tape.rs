//! Wengert tape for reverse-mode differentiation.
//!
//! A forward pass records primitive operations into a [`Tape`]; calling
//! [`Tape::backward`] replays them in reverse and accumulates gradients
//! for every node, in particular the named parameter leaves.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::tensor::{self, Tensor, COSINE_NORM_GUARD};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// One row of a rank-2 leaf, as a vector.
    Row { table: VarId, row: usize },
    Affine { w: VarId, x: VarId, b: VarId },
    MatVec { w: VarId, x: VarId },
    Add(VarId, VarId),
    AddN(Vec<VarId>),
    Scale(VarId, f64),
    MulElem(VarId, VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Cosine(VarId, VarId),
    Softmax(VarId),
    /// KL(target ‖ p_hat) with a constant target distribution.
    KlToTarget { target: Tensor, p_hat: VarId },
    /// Scalars gathered into one vector.
    Gather(Vec<VarId>),
    /// Σ_t weights[t] · vectors[t].
    WeightedSum { weights: VarId, vectors: Vec<VarId> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> &Tensor {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, VarId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Constant or input node; receives a gradient but is not named.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Named trainable leaf; its gradient is collected by [`Tape::backward_named`].
    pub fn param(&mut self, name: &str, value: Tensor) -> VarId {
        let id = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.leaf(Tensor::scalar(v))
    }

    /// Row `row` of a rank-2 node as a vector; gradients flow into that row.
    pub fn row(&mut self, table: VarId, row: usize) -> VarId {
        let value = Tensor::vector(self.value(table).row(row).to_vec());
        self.push(value, Op::Row { table, row })
    }

    pub fn affine(&mut self, w: VarId, x: VarId, b: VarId) -> Result<VarId> {
        let value = tensor::affine(self.value(w), self.value(x), self.value(b))?;
        Ok(self.push(value, Op::Affine { w, x, b }))
    }

    pub fn matvec(&mut self, w: VarId, x: VarId) -> Result<VarId> {
        let (m, n) = self
            .value(w)
            .dims2()
            .ok_or_else(|| Error::dimension("matvec", "W must be rank 2"))?;
        if self.value(x).shape() != [n] {
            return Err(Error::dimension(
                "matvec",
                format!("W is {}x{} but x has shape {:?}", m, n, self.value(x).shape()),
            ));
        }
        let b = Tensor::zeros(&[m]);
        let value = tensor::affine(self.value(w), self.value(x), &b)?;
        Ok(self.push(value, Op::MatVec { w, x }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_n(&mut self, terms: &[VarId]) -> Result<VarId> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::domain("add_n", "empty term list"))?;
        let mut value = self.value(first).clone();
        for &t in &terms[1..] {
            if self.value(t).shape() != value.shape() {
                return Err(Error::dimension("add_n", "mismatched term shapes"));
            }
            value.add_assign(self.value(t));
        }
        Ok(self.push(value, Op::AddN(terms.to_vec())))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> VarId {
        let mut value = self.value(x).clone();
        for v in value.values_mut() {
            *v *= factor;
        }
        self.push(value, Op::Scale(x, factor))
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(
                "mul_elem",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let values: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), values).expect("shape checked");
        Ok(self.push(value, Op::MulElem(a, b)))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let values: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), values).expect("same shape");
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let values: Vec<f64> = self.value(x).values().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), values).expect("same shape");
        self.push(value, Op::Tanh(x))
    }

    pub fn cosine(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = tensor::cosine(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(value), Op::Cosine(a, b)))
    }

    pub fn softmax(&mut self, scores: VarId) -> Result<VarId> {
        let value = tensor::softmax(self.value(scores))?;
        Ok(self.push(value, Op::Softmax(scores)))
    }

    pub fn kl_to_target(&mut self, target: &Tensor, p_hat: VarId) -> Result<VarId> {
        let value = tensor::kl_divergence(target, self.value(p_hat))?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlToTarget { target: target.clone(), p_hat },
        ))
    }

    /// Gather scalar nodes into one vector node.
    pub fn gather(&mut self, elems: &[VarId]) -> Result<VarId> {
        let mut values = Vec::with_capacity(elems.len());
        for &e in elems {
            if !self.value(e).is_scalar() {
                return Err(Error::domain("gather", "all elements must be scalars"));
            }
            values.push(self.value(e).item());
        }
        Ok(self.push(Tensor::vector(values), Op::Gather(elems.to_vec())))
    }

    pub fn weighted_sum(&mut self, weights: VarId, vectors: &[VarId]) -> Result<VarId> {
        if self.value(weights).len() != vectors.len() {
            return Err(Error::dimension(
                "weighted_sum",
                format!("{} weights for {} vectors", self.value(weights).len(), vectors.len()),
            ));
        }
        let first = vectors
            .first()
            .ok_or_else(|| Error::domain("weighted_sum", "empty vector list"))?;
        let dim = self.value(*first).len();
        let mut out = vec![0.0; dim];
        for (t, &v) in vectors.iter().enumerate() {
            if self.value(v).len() != dim {
                return Err(Error::dimension("weighted_sum", "mismatched vector dims"));
            }
            let w = self.value(weights).values()[t];
            for (o, x) in out.iter_mut().zip(self.value(v).values()) {
                *o += w * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedSum { weights, vectors: vectors.to_vec() }))
    }

    /// Reverse pass from a scalar loss node. Every node gets a gradient;
    /// nodes off the path keep zeros.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0] = Tensor::scalar(1.0);

        for i in (0..self.nodes.len()).rev() {
            let g = grads[i].clone();
            if g.values().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Row { table, row } => {
                    let (_, c) = self.value(*table).dims2().expect("rank-2 table");
                    let dst = &mut grads[table.0];
                    for (j, &gv) in g.values().iter().enumerate() {
                        dst.values_mut()[row * c + j] += gv;
                    }
                }
                Op::Affine { w, x, b } => {
                    self.backprop_matvec(*w, *x, &g, &mut grads);
                    grads[b.0].add_assign(&g);
                }
                Op::MatVec { w, x } => {
                    self.backprop_matvec(*w, *x, &g, &mut grads);
                }
                Op::Add(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].add_assign(&g);
                }
                Op::AddN(terms) => {
                    for &t in terms {
                        grads[t.0].add_assign(&g);
                    }
                }
                Op::Scale(x, factor) => {
                    for (dst, &gv) in grads[x.0].values_mut().iter_mut().zip(g.values()) {
                        *dst += factor * gv;
                    }
                }
                Op::MulElem(a, b) => {
                    let av = self.value(*a).values().to_vec();
                    let bv = self.value(*b).values().to_vec();
                    for ((dst, &gv), &other) in
                        grads[a.0].values_mut().iter_mut().zip(g.values()).zip(&bv)
                    {
                        *dst += gv * other;
                    }
                    for ((dst, &gv), &other) in
                        grads[b.0].values_mut().iter_mut().zip(g.values()).zip(&av)
                    {
                        *dst += gv * other;
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.values().to_vec();
                    for ((dst, &gv), &yi) in
                        grads[x.0].values_mut().iter_mut().zip(g.values()).zip(&y)
                    {
                        *dst += gv * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.values().to_vec();
                    for ((dst, &gv), &yi) in
                        grads[x.0].values_mut().iter_mut().zip(g.values()).zip(&y)
                    {
                        *dst += gv * (1.0 - yi * yi);
                    }
                }
                Op::Cosine(a, b) => {
                    let gv = g.item();
                    let av = self.value(*a).values().to_vec();
                    let bv = self.value(*b).values().to_vec();
                    let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // guard region: flat zero, no gradient
                    if na >= COSINE_NORM_GUARD && nb >= COSINE_NORM_GUARD {
                        let dot: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
                        let c = dot / (na * nb);
                        for (j, dst) in grads[a.0].values_mut().iter_mut().enumerate() {
                            *dst += gv * (bv[j] / (na * nb) - c * av[j] / (na * na));
                        }
                        for (j, dst) in grads[b.0].values_mut().iter_mut().enumerate() {
                            *dst += gv * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = self.nodes[i].value.values().to_vec();
                    let dot: f64 = g.values().iter().zip(&y).map(|(gv, yv)| gv * yv).sum();
                    for ((dst, &gv), &yv) in
                        grads[x.0].values_mut().iter_mut().zip(g.values()).zip(&y)
                    {
                        *dst += yv * (gv - dot);
                    }
                }
                Op::KlToTarget { target, p_hat } => {
                    let gv = g.item();
                    let qv = self.value(*p_hat).values().to_vec();
                    for ((dst, &pi), &qi) in
                        grads[p_hat.0].values_mut().iter_mut().zip(target.values()).zip(&qv)
                    {
                        if pi > 0.0 {
                            *dst += gv * (-pi / qi);
                        }
                    }
                }
                Op::Gather(elems) => {
                    for (k, &e) in elems.iter().enumerate() {
                        grads[e.0].values_mut()[0] += g.values()[k];
                    }
                }
                Op::WeightedSum { weights, vectors } => {
                    let wv = self.value(*weights).values().to_vec();
                    for (t, &v) in vectors.iter().enumerate() {
                        let vv = self.value(v).values().to_vec();
                        let dot: f64 = g.values().iter().zip(&vv).map(|(gv, x)| gv * x).sum();
                        grads[weights.0].values_mut()[t] += dot;
                        for (dst, &gv) in grads[v.0].values_mut().iter_mut().zip(g.values()) {
                            *dst += wv[t] * gv;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    // y = W x: dW[i][j] += g[i]·x[j], dx[j] += W[i][j]·g[i]
    fn backprop_matvec(&self, w: VarId, x: VarId, g: &Tensor, grads: &mut [Tensor]) {
        let (m, n) = self.value(w).dims2().expect("rank-2 weight");
        let wv = self.value(w).values().to_vec();
        let xv = self.value(x).values().to_vec();
        for i in 0..m {
            let gi = g.values()[i];
            for j in 0..n {
                grads[w.0].values_mut()[i * n + j] += gi * xv[j];
                grads[x.0].values_mut()[j] += wv[i * n + j] * gi;
            }
        }
    }

    /// Backward pass returning gradients keyed by parameter name.
    /// Parameters never touched by the forward pass get zero gradients.
    pub fn backward_named(&self, loss: VarId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, id)| (name.clone(), grads.get(*id).clone()))
            .collect())
    }
}
