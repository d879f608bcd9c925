//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each recorded op stores
//! its output value, the indices of its inputs and a closure mapping the
//! output gradient to input gradients. Because nodes are only ever appended
//! and an op can only consume existing [`Var`]s, the node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Maps the output gradient to one gradient per parent. `needs[i]` tells the
/// rule whether parent `i` wants a gradient at all; rules may return `None`
/// for parents that do not.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    is_leaf: bool,
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`backward`](Self::backward) always reports a
    /// gradient for it, zero if the loss does not depend on it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            is_leaf: true,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].requires_grad)
    }

    /// Appends an op node. The backward rule is dropped when no parent needs
    /// a gradient.
    pub(crate) fn record(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Result<Var> {
        let parents = parents.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
            is_leaf: false,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`. Gradients reaching the same node
    /// along several paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        let loss_value = &self.nodes[root].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_string()));
        }

        let mut acc: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        acc[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if node.is_leaf || !node.requires_grad {
                continue;
            }
            let Some(grad) = acc[i].take() else { continue };
            let Some(rule) = node.backward.as_ref() else { continue };
            let grad = Tensor::from_vec_unchecked(node.value.shape(), grad);
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = rule(&grad, &needs)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut acc[p] {
                    Some(sum) => sum.iter_mut().zip(g.data()).for_each(|(s, &v)| *s += v),
                    slot @ None => *slot = Some(g.to_vec()),
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                let shape = node.value.shape();
                let g = match acc[i].take() {
                    Some(v) => Tensor::from_op("backward", shape, v)?,
                    None => Tensor::zeros(shape),
                };
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    /// `a + b` for equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a)?.add(self.value(b)?)?;
        self.record(value, &[a, b], Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    /// Arithmetic mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        let shape = x.shape();
        let n = T::from_usize(x.numel()).expect("element count fits the scalar type");
        let value = Tensor::from_op("mean", Shape::scalar(), vec![x.sum() / n])?;
        self.record(
            value,
            &[a],
            Box::new(move |g, _| {
                let share = g.data()[0] / n;
                Ok(vec![Some(Tensor::full(shape, share)?)])
            }),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        let shape = x.shape();
        let value = Tensor::from_op("sum", Shape::scalar(), vec![x.sum()])?;
        self.record(value, &[a], Box::new(move |g, _| Ok(vec![Some(Tensor::full(shape, g.data()[0])?)])))
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants, intermediate
    /// values and vars from another graph.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(dims, data).unwrap()
    }

    #[test]
    fn add_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = t(&[1, 1, 2, 2], &[0.5, -1.0, 3.0, 2.0]);
        let a = g.constant(x.clone());
        let z = g.constant(Tensor::zeros(x.shape()));
        let c = g.add(a, z).unwrap();
        assert_eq!(g.value(c).unwrap(), &x);
    }

    #[test]
    fn add_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mean_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(a).unwrap();
        assert_eq!(g.value(m).unwrap().item().unwrap(), 2.5);

        let c = g.constant(Tensor::full(Shape::new(&[3, 3]).unwrap(), 1.75).unwrap());
        let m = g.mean(c).unwrap();
        assert_eq!(g.value(m).unwrap().item().unwrap(), 1.75);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::nchw(1, 1, 2, 2).unwrap()));
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn shared_input_accumulates() {
        // y = mean(x + x) => dy/dx = 2/N
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.add(x, x).unwrap();
        let m = g.mean(s).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.leaf(t(&[1], &[1.0]));
        let _ = g2.leaf(t(&[1], &[1.0]));
        assert!(matches!(g2.backward(x), Err(Error::ForeignVar)));
        assert!(matches!(g2.mean(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let m = g.mean(c).unwrap();
        let grads = g.backward(m).unwrap();
        assert!(grads.get(c).is_none());
    }
}
