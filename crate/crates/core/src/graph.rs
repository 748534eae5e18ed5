//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents already exist, so node order is a topological order and backward
//! evaluation is a single reverse sweep that visits each node once.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the graph's built-in set.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait Function {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    GradReverse {
        input: Var,
        scale: f64,
    },
    Custom {
        inputs: Vec<Var>,
        function: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar objective, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the objective.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let v = x.zip_map(y, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let v = x.zip_map(y, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let v = x.zip_map(y, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = ops::softmax(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = ops::conv1d(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            v,
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let v = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(v, Op::Dense { input, weights, bias }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let v = ops::upsample_nearest(self.value(input), factor)?;
        Ok(self.push(v, Op::Upsample { input, factor }))
    }

    /// Gathers rows of the leading axis, in the given order.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape().first().copied().unwrap_or(0);
        if rows.is_empty() || x.rank() == 0 {
            return Err(invalid("select_rows", "need a leading axis and at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(invalid(
                "select_rows",
                alloc::format!("row {bad} out of range for {n} rows"),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * x.len() / n);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-scale` on the backward pass.
    pub fn gradient_reversal(&mut self, input: Var, scale: f64) -> Var {
        let v = self.value(input).clone();
        self.push(v, Op::GradReverse { input, scale })
    }

    pub fn custom(&mut self, inputs: &[Var], function: Box<dyn Function>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = function.forward(&values)?;
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                function,
            },
        ))
    }

    /// Propagates d(objective)/d(node) to every node that feeds the objective.
    pub fn backward(&self, objective: Var) -> Result<Gradients> {
        let obj = &self.nodes[objective.0].value;
        if !obj.is_scalar() {
            return Err(Error::NonScalarObjective(obj.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; objective.0 + 1];
        grads[objective.0] = Some(Tensor::full(obj.shape(), 1.0));

        for idx in (0..=objective.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, contribution) in self.local_grads(node, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |p, q| p * q)),
                (*b, g.zip_map(val(*a), |p, q| p * q)),
            ],
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Relu(a) => vec![(*a, ops::relu_backward(val(*a), g))],
            Op::Sigmoid(a) => vec![(*a, ops::sigmoid_backward(&node.value, g))],
            Op::Softmax(a) => vec![(*a, ops::softmax_backward(&node.value, g))],
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let (gi, gk, gb) = ops::conv1d_backward(val(*input), val(*kernels), val(*bias), *stride, *padding, g)?;
                vec![(*input, gi), (*kernels, gk), (*bias, gb)]
            }
            Op::Dense { input, weights, bias } => {
                let (gi, gw, gb) = ops::dense_backward(val(*input), val(*weights), val(*bias), g)?;
                vec![(*input, gi), (*weights, gw), (*bias, gb)]
            }
            Op::Upsample { input, factor } => {
                vec![(*input, ops::upsample_nearest_backward(val(*input).shape(), *factor, g)?)]
            }
            Op::SelectRows { input, rows } => {
                let x = val(*input);
                let width = x.len() / x.shape()[0];
                let mut gx = Tensor::zeros_like(x);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut gx.data_mut()[r * width..(r + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g.data()[k * width..(k + 1) * width]) {
                        *d += s;
                    }
                }
                vec![(*input, gx)]
            }
            Op::GradReverse { input, scale } => vec![(*input, g.map(|x| -scale * x))],
            Op::Custom { inputs, function } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = function.backward(&values, &node.value, g);
                debug_assert_eq!(
                    gs.len(),
                    inputs.len(),
                    "{} returned wrong gradient count",
                    function.name()
                );
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> Tensor {
        Tensor::scalar(x)
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(s(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(s(3.0));
        let zero = g.scale(x, 0.0);
        let c = g.leaf(s(4.0));
        let y = g.add(zero, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(s(2.0));
        let y = g.leaf(s(5.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarObjective(_))));
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(s(1.0));
        let other = g.leaf(s(2.0));
        let y = g.scale(x, 3.0);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(other).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn gradient_reversal_flips_and_scales() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let r = g.gradient_reversal(x, 1.0);
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0]);
        let y = g.scale(r, 2.0);
        let y = g.sum(y);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-2.0, -2.0, -2.0]);

        let mut g = Graph::new();
        let x = g.leaf(s(1.0));
        let r = g.gradient_reversal(x, 0.0);
        let y = g.scale(r, 2.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]));
            let r = g.relu(x);
            let q = g.mul(r, x).unwrap();
            let y = g.mean(q);
            (g, x, y)
        };
        let (g1, x1, y1) = build();
        let (g2, x2, y2) = build();
        let a = g1.backward(y1).unwrap();
        let b = g2.backward(y2).unwrap();
        assert_eq!(a.get(x1), b.get(x2));
        assert_eq!(g1.backward(y1).unwrap().get(x1), a.get(x1));
    }

    #[test]
    fn shared_node_accumulates() {
        // y = sum(select([x], [0, 0])) counts x twice
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 5.0]).unwrap());
        let sel = g.select_rows(x, &[0, 0, 1]).unwrap();
        let y = g.sum(sel);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0]);
    }
}
