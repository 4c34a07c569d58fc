//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! Nodes are appended in evaluation order, so every parent precedes its
//! children and a single reverse sweep over the tape is a valid reverse
//! topological traversal.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::losses::{self, SparsityVariant};
use crate::mask::{self, BnTrainCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, geometry: ConvGeometry, cols: Vec<T> },
    Dense { input: NodeId, weight: NodeId, bias: NodeId },
    Relu { input: NodeId },
    AvgPool { input: NodeId, size: usize },
    Reshape { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: T },
    Sum { input: NodeId },
    SoftmaxCe { logits: NodeId, probs: Vec<T>, labels: Vec<usize> },
    BatchNorm { input: NodeId, beta: NodeId, gamma: NodeId, cache: Box<BnTrainCache<T>> },
    Sparsity { beta: NodeId, gamma: NodeId, dbeta: Vec<T>, dgamma: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// A single forward/backward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (x, w) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        let geometry = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(x, w, stride, padding)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Op::Conv2d { input, weight, geometry, cols }, out, rg))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = kernels::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Op::Dense { input, weight, bias }, out, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = kernels::relu(self.value(input));
        let rg = self.rg(input);
        self.push(Op::Relu { input }, out, rg)
    }

    pub fn avg_pool(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let out = kernels::avg_pool(self.value(input), size)?;
        let rg = self.rg(input);
        Ok(self.push(Op::AvgPool { input, size }, out, rg))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::flatten(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(Op::Reshape { input }, out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b }, out, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let out = self.value(input).map(|x| x * factor);
        let rg = self.rg(input);
        self.push(Op::Scale { input, factor }, out, rg)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(Op::Sum { input }, out, rg)
    }

    /// Mean softmax cross-entropy of `[N, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(Op::SoftmaxCe { logits, probs, labels: labels.to_vec() }, Tensor::scalar(loss), rg))
    }

    /// Training-mode batch norm, optionally multiplied by the relaxed
    /// channel mask. Returns the output node; the forward cache (batch
    /// statistics, mask activations) is available through
    /// [`Graph::bn_cache`].
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        beta: NodeId,
        gamma: NodeId,
        eps: T,
        mask: Option<mask::MaskInput<'_, T>>,
    ) -> Result<NodeId> {
        let (out, cache) = mask::bn_forward_train(
            self.value(input),
            self.value(beta).data(),
            self.value(gamma).data(),
            eps,
            mask,
        )?;
        let rg = self.rg(input) || self.rg(beta) || self.rg(gamma);
        Ok(self.push(Op::BatchNorm { input, beta, gamma, cache: Box::new(cache) }, out, rg))
    }

    pub fn bn_cache(&self, id: NodeId) -> Option<&BnTrainCache<T>> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { cache, .. } => Some(cache),
            _ => None,
        }
    }

    /// Sparsity regularizer over one BN layer's affine parameters,
    /// optionally restricted to selected channels.
    pub fn sparsity(
        &mut self,
        beta: NodeId,
        gamma: NodeId,
        s: T,
        variant: SparsityVariant,
        selected: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (loss, dbeta, dgamma) =
            losses::sparsity_term(self.value(beta).data(), self.value(gamma).data(), s, variant, selected)?;
        let rg = self.rg(beta) || self.rg(gamma);
        Ok(self.push(Op::Sparsity { beta, gamma, dbeta, dgamma }, Tensor::scalar(loss), rg))
    }

    fn accumulate(&mut self, id: NodeId, shape: &[usize], grad: Vec<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        let node = &mut self.nodes[id.0];
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => node.grad = Some(Tensor::new(shape.to_vec(), grad)?),
        }
        Ok(())
    }

    /// Back-propagates from a scalar loss. Gradients from repeated uses of a
    /// node are summed. Gradients from an earlier call are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(&loss_shape));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else { continue };
            self.backprop_node(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, grad: &Tensor<T>) -> Result<()> {
        let g = grad.data();
        // Temporarily move the op out so parents can be mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.backprop_op(&op, g);
        self.nodes[idx].op = op;
        result
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes[id.0].value.shape().to_vec()
    }

    fn backprop_op(&mut self, op: &Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geometry, cols } => {
                let need_dx = self.rg(*input);
                let (dw, dx) = kernels::conv2d_backward(geometry, g, self.value(*weight).data(), cols, need_dx);
                let ws = self.shape_of(*weight);
                self.accumulate(*weight, &ws, dw)?;
                if let Some(dx) = dx {
                    let xs = self.shape_of(*input);
                    self.accumulate(*input, &xs, dx)?;
                }
            }
            Op::Dense { input, weight, bias } => {
                let (dx, dw, db) = kernels::dense_backward(self.value(*input), self.value(*weight), g);
                let (xs, ws, bs) = (self.shape_of(*input), self.shape_of(*weight), self.shape_of(*bias));
                self.accumulate(*input, &xs, dx)?;
                self.accumulate(*weight, &ws, dw)?;
                self.accumulate(*bias, &bs, db)?;
            }
            Op::Relu { input } => {
                let dx = kernels::relu_backward(self.value(*input).data(), g);
                let xs = self.shape_of(*input);
                self.accumulate(*input, &xs, dx)?;
            }
            Op::AvgPool { input, size } => {
                let xs = self.shape_of(*input);
                let dx = kernels::avg_pool_backward(&xs, *size, g);
                self.accumulate(*input, &xs, dx)?;
            }
            Op::Reshape { input } => {
                let xs = self.shape_of(*input);
                self.accumulate(*input, &xs, g.to_vec())?;
            }
            Op::Add { a, b } => {
                let s = self.shape_of(*a);
                self.accumulate(*a, &s, g.to_vec())?;
                self.accumulate(*b, &s, g.to_vec())?;
            }
            Op::Mul { a, b } => {
                let s = self.shape_of(*a);
                let da: Vec<T> = g.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> = g.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                self.accumulate(*a, &s, da)?;
                self.accumulate(*b, &s, db)?;
            }
            Op::Scale { input, factor } => {
                let s = self.shape_of(*input);
                self.accumulate(*input, &s, g.iter().map(|&v| v * *factor).collect())?;
            }
            Op::Sum { input } => {
                let s = self.shape_of(*input);
                let n = self.value(*input).len();
                self.accumulate(*input, &s, vec![g[0]; n])?;
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let s = self.shape_of(*logits);
                self.accumulate(*logits, &s, kernels::softmax_cross_entropy_backward(probs, labels, g[0]))?;
            }
            Op::BatchNorm { input, beta, gamma, cache } => {
                let need_dx = self.rg(*input);
                let (dx, db, dg) = mask::bn_backward_train(g, cache, need_dx);
                let (bs, gs) = (self.shape_of(*beta), self.shape_of(*gamma));
                self.accumulate(*beta, &bs, db)?;
                self.accumulate(*gamma, &gs, dg)?;
                if let Some(dx) = dx {
                    let xs = self.shape_of(*input);
                    self.accumulate(*input, &xs, dx)?;
                }
            }
            Op::Sparsity { beta, gamma, dbeta, dgamma } => {
                let (bs, gs) = (self.shape_of(*beta), self.shape_of(*gamma));
                self.accumulate(*beta, &bs, dbeta.iter().map(|&v| v * g[0]).collect())?;
                self.accumulate(*gamma, &gs, dgamma.iter().map(|&v| v * g[0]).collect())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        // y = a + a with a = 3x, so dy/dx = 6
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let a = g.scale(x, 3.0);
        let y = g.add(a, a).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0, 6.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn relu_indicator_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_slice(&[2], &[-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let x = g.param(Tensor::ones(&[2]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn backward_twice_is_idempotent() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }
}
