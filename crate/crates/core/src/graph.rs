//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so insertion order is already a topological order.
//! [`Graph::backward`] walks the tape once in reverse. Graphs are rebuilt for
//! every forward pass and are not shared across threads.
//!
//! Broadcasting is limited to equal shapes and scalar-vs-tensor.

use std::rc::Rc;

use crate::{Error, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A node whose backward pass is supplied by the caller, e.g. a
/// straight-through estimator.
pub trait CustomGradRule {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Maps the upstream gradient to one gradient per input; each must have
    /// the shape of the corresponding input.
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var, f64),
    Matmul(Var, Var),
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    Gather(Var, Rc<[Option<usize>]>),
    Detach,
    Custom(Rc<dyn CustomGradRule>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to a trainable leaf.
    /// Leaves the loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value, gradient flow cut.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = if x.shape() == y.shape() {
            x.zip_map(y, |p, q| apply_binary(op, p, q))
        } else if y.is_scalar() {
            let q = y.item();
            x.map(|p| apply_binary(op, p, q))
        } else if x.is_scalar() {
            let p = x.item();
            y.map(|q| apply_binary(op, p, q))
        } else {
            return Err(Error::Shape(format!(
                "{op:?}: shapes {:?} and {:?} are neither equal nor scalar",
                x.shape(),
                y.shape()
            )));
        };
        if op == BinaryOp::Div && self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let out = out.ensure_finite("binary op")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary(op, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c).ensure_finite("add_const")?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::AddConst(a), needs))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c).ensure_finite("mul_const")?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::MulConst(a, c), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp).ensure_finite("exp")?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Exp(a), needs))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.log_shifted(a, 0.0)
    }

    /// `log(x + eps)`, the clamped variant used by the losses.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.log_shifted(a, eps)
    }

    fn log_shifted(&mut self, a: Var, eps: f64) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x + eps <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        let out = self.value(a).map(|x| (x + eps).ln()).ensure_finite("log")?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Log(a, eps), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), needs))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let out = x.softmax_rows();
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), needs))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum()).ensure_finite("sum")?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Sum(a), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.mul_const(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i]` is `None`. Covers
    /// permutations and im2col with zero padding.
    pub fn gather(&mut self, a: Var, index: Rc<[Option<usize>]>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Gather(a, index), needs))
    }

    pub fn custom(&mut self, rule: Rc<dyn CustomGradRule>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = rule.forward(&values)?.ensure_finite(rule.name())?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Custom(rule, inputs.to_vec()), needs))
    }

    /// Populates gradients of `loss` for every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            for (input, g) in self.local_grads(idx, &upstream)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            } else if !node.trainable {
                grads[idx] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, idx: usize, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let grads = match &node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::Binary(op, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (ga, gb) = binary_grads(*op, x, y, up);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddConst(a) => vec![(*a, up.clone())],
            Op::MulConst(a, c) => vec![(*a, up.map(|g| g * c))],
            Op::Relu(a) => {
                let x = self.value(*a);
                vec![(*a, up.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }))]
            }
            Op::Exp(a) => vec![(*a, up.zip_map(out, |g, y| g * y))],
            Op::Log(a, eps) => {
                let x = self.value(*a);
                vec![(*a, up.zip_map(x, |g, x| g / (x + eps)))]
            }
            Op::Matmul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                vec![(*a, up.matmul_nt(y)?), (*b, x.matmul_tn(up)?)]
            }
            Op::Softmax(a) => {
                let m = out.last_dim();
                let mut g = up.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(m).zip(out.data().chunks(m)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![(*a, g)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), up.item()))],
            Op::Reshape(a) => {
                vec![(*a, up.clone().reshape(self.value(*a).shape().to_vec())?)]
            }
            Op::Gather(a, index) => {
                let mut g = Tensor::zeros(self.value(*a).shape());
                let gd = g.data_mut();
                for (i, &u) in index.iter().zip(up.data()) {
                    if let Some(i) = i {
                        gd[*i] += u;
                    }
                }
                vec![(*a, g)]
            }
            Op::Custom(rule, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = rule.backward(up, &values, out);
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        rule.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (g, v) in gs.iter().zip(&values) {
                    if g.shape() != v.shape() {
                        return Err(Error::Contract(format!(
                            "{} gradient shape {:?} differs from input shape {:?}",
                            rule.name(),
                            g.shape(),
                            v.shape()
                        )));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(grads)
    }
}

fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    }
}

/// Gradients of a broadcasting binary op; a scalar side receives the sum.
fn binary_grads(op: BinaryOp, x: &Tensor, y: &Tensor, up: &Tensor) -> (Tensor, Tensor) {
    let n = up.numel();
    let xv = |i: usize| if x.is_scalar() { x.item() } else { x.data()[i] };
    let yv = |i: usize| if y.is_scalar() { y.item() } else { y.data()[i] };
    let mut ga = Tensor::zeros(x.shape());
    let mut gb = Tensor::zeros(y.shape());
    for i in 0..n {
        let g = up.data()[i];
        let (da, db) = match op {
            BinaryOp::Add => (g, g),
            BinaryOp::Sub => (g, -g),
            BinaryOp::Mul => (g * yv(i), g * xv(i)),
            BinaryOp::Div => (g / yv(i), -g * xv(i) / (yv(i) * yv(i))),
        };
        let ia = if x.numel() == n { i } else { 0 };
        let ib = if y.numel() == n { i } else { 0 };
        ga.data_mut()[ia] += da;
        gb.data_mut()[ib] += db;
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 4., 5., 6.]);

        let r = g.constant(t(&[1, 2], &[1., 2.]));
        let col = g.constant(t(&[2, 1], &[3., 4.]));
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.; 6]));
        let b = g.constant(t(&[2, 3], &[0.; 6]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(t(&[1], &[0.]));
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).data(), &[1.]);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1., 0.]));
        let y = g.constant(t(&[2], &[1., 1.]));
        assert!(matches!(g.div(y, x), Err(Error::Domain(_))));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        assert!(g.log_eps(x, 1e-12).is_ok());
        let big = g.constant(t(&[1], &[1000.]));
        assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[3], &[1., 2., 3.]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0.; 4]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let y = g.constant(t(&[2], &[1000., 0.]));
        let s = g.softmax(y).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1., 2., 3.]));
        let c = g.constant(t(&[1], &[5.]));
        let loss = g.mul_const(c, 2.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.; 3]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1., 2.]));
        let d = g.detach(w);
        let p = g.mul(d, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(3.0));
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let p = g.mul(s, x).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[6.]);
    }

    struct BadRule;
    impl CustomGradRule for BadRule {
        fn name(&self) -> &str {
            "bad"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(inputs[0].clone())
        }
        fn backward(&self, _: &Tensor, _: &[&Tensor], _: &Tensor) -> Vec<Tensor> {
            vec![Tensor::zeros(&[7])]
        }
    }

    #[test]
    fn custom_rule_shape_contract_enforced() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1., 2.]));
        let y = g.custom(Rc::new(BadRule), &[w]).unwrap();
        let loss = g.sum(y).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1., 2., 3.]));
        let idx: Rc<[Option<usize>]> = vec![Some(2), None, Some(2), Some(0)].into();
        let y = g.gather(w, idx, vec![4]).unwrap();
        assert_eq!(g.value(y).data(), &[3., 0., 3., 1.]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1., 0., 2.]);
    }
}
