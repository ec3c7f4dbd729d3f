//! Define-by-run reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so the node index is a valid
//! topological order: replaying a forward pass walks the tape front to back and
//! the backward pass walks it back to front, visiting each node once. Leaf
//! values may be replaced with [`Tape::set_value`]; the graph then has to be
//! re-evaluated with [`Tape::forward`] before gradients can be taken.

use std::sync::Arc;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, NodeRef, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    AffineCols {
        x: Var,
        scale: Vec<T>,
        shift: Vec<T>,
    },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Reshape(Var),
    RowNorm(Var),
    NormalizeRows {
        x: Var,
        eps: T,
    },
    SquaredError(Var, Var),
    Bce {
        prob: Var,
        target: Var,
    },
    BceLogits {
        logits: Var,
        target: Var,
    },
    KlStdNormal {
        mean: Var,
        logvar: Var,
    },
    Gaussian {
        x: Var,
        centers: Arc<Tensor<T>>,
        inv_two_sigma: T,
        scale: T,
        absent_zero: bool,
    },
    Euler(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::SquaredError(a, b)
            | Op::Bce { prob: a, target: b }
            | Op::KlStdNormal { mean: a, logvar: b } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::AffineCols { x: a, .. }
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::RowNorm(a)
            | Op::NormalizeRows { x: a, .. }
            | Op::BceLogits { logits: a, .. }
            | Op::Gaussian { x: a, .. }
            | Op::Euler(a) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::AffineCols { .. } => "affine_cols",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::RowNorm(..) => "row_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::SquaredError(..) => "squared_error",
            Op::Bce { .. } => "bce",
            Op::BceLogits { .. } => "bce_logits",
            Op::KlStdNormal { .. } => "kl_std_normal",
            Op::Gaussian { .. } => "gaussian",
            Op::Euler(..) => "euler_rotation",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Per-forward cache (row norms for the normalisation ops).
    aux: Vec<T>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `var`. `None` for nodes that do not
    /// require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn expect(&self, var: Var) -> &Tensor<T> {
        self.get(var)
            .expect("gradient requested for a node without requires_grad")
    }
}

/// A computation graph. Single-writer: building, forward and backward must be
/// externally serialized; distinct tapes share nothing.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    stale: bool,
}

const BCE_CLAMP: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stale: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn info(&self, v: Var) -> NodeRef {
        let n = &self.nodes[v.0];
        NodeRef {
            index: v.0,
            op: n.op.name(),
            shape: n.value.shape(),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Replaces the value of a leaf; the tape must be re-run with [`Tape::forward`].
    pub fn set_value(&mut self, v: Var, value: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidOperand {
                op: "set_value",
                node: self.info(v),
                reason: "only leaves can be assigned".into(),
            });
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Dimension {
                expected: format!("{:?}", node.value.shape()),
                got: format!("{:?}", value.shape()),
            });
        }
        self.nodes[v.0].value.copy_from(value)?;
        self.stale = true;
        Ok(())
    }

    /// Mutable access to a leaf value; marks the graph stale.
    pub fn leaf_mut(&mut self, v: Var) -> &mut Tensor<T> {
        assert!(matches!(self.nodes[v.0].op, Op::Leaf), "leaf_mut on a non-leaf");
        self.stale = true;
        &mut self.nodes[v.0].value
    }

    /// Re-evaluates every derived node from the current leaf values and returns
    /// the value at `root`.
    pub fn forward(&mut self, root: Var) -> Result<&Tensor<T>> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            eval(&node.op, before, &mut node.value, &mut node.aux);
        }
        self.stale = false;
        Ok(&self.nodes[root.0].value)
    }

    fn push(&mut self, op: Op<T>, shape: (usize, usize), parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.rg(p));
        let mut value = Tensor::zeros(shape.0, shape.1);
        let mut aux = Vec::new();
        eval(&op, &self.nodes, &mut value, &mut aux);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.info(a),
                rhs: self.info(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), self.shape(a), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), self.shape(a), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), self.shape(a), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.push(Op::Scale(a, s), self.shape(a), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.push(Op::AddScalar(a, s), self.shape(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.info(a),
                rhs: self.info(b),
            });
        }
        Ok(self.push(Op::MatMul(a, b), (m, n), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), (c, r), &[a])
    }

    /// `x (n x k) + row (1 x k)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, k) = self.shape(x);
        if self.shape(row) != (1, k) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.info(x),
                rhs: self.info(row),
            });
        }
        Ok(self.push(Op::AddRow(x, row), self.shape(x), &[x, row]))
    }

    /// Affine layer `x W + b` with `b` a row vector.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Per-column constant affine map `y[r, c] = x[r, c] * scale[c] + shift[c]`.
    pub fn affine_cols(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let (_, k) = self.shape(x);
        if scale.len() != k || shift.len() != k {
            return Err(Error::InvalidOperand {
                op: "affine_cols",
                node: self.info(x),
                reason: format!("expected {k} column coefficients"),
            });
        }
        Ok(self.push(Op::AffineCols { x, scale, shift }, self.shape(x), &[x]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a), self.shape(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a), self.shape(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a), self.shape(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a), self.shape(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Ln(a), self.shape(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a), self.shape(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a), self.shape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), (1, 1), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::InvalidOperand {
                op: "reshape",
                node: self.info(a),
                reason: format!("cannot view as {rows}x{cols}"),
            });
        }
        Ok(self.push(Op::Reshape(a), (rows, cols), &[a]))
    }

    /// Euclidean norm of every row, as an `n x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        self.push(Op::RowNorm(a), (r, 1), &[a])
    }

    /// Scales every row to unit length. Rows whose norm is below `eps` become
    /// all-zero rows and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        self.push(Op::NormalizeRows { x: a, eps }, self.shape(a), &[a])
    }

    /// `sum((a - b)^2)`
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        Ok(self.push(Op::SquaredError(a, b), (1, 1), &[a, b]))
    }

    /// `sum(-t ln p - (1 - t) ln(1 - p))`, with `p` clamped away from 0 and 1.
    /// Differentiable in both probabilities and targets.
    pub fn bce(&mut self, prob: Var, target: Var) -> Result<Var> {
        self.same_shape("bce", prob, target)?;
        Ok(self.push(Op::Bce { prob, target }, (1, 1), &[prob, target]))
    }

    /// Bernoulli divergence from logits: `sum(softplus(z) - t z - H(t))`, i.e.
    /// binary cross-entropy minus the entropy of the target, which is zero for a
    /// perfect reconstruction. Targets must be constants in `[0, 1]`.
    pub fn bce_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.same_shape("bce_logits", logits, target)?;
        if self.rg(target) {
            return Err(Error::InvalidOperand {
                op: "bce_logits",
                node: self.info(target),
                reason: "targets must not require gradients".into(),
            });
        }
        Ok(self.push(Op::BceLogits { logits, target }, (1, 1), &[logits]))
    }

    /// `KL(N(mean, exp(logvar)) || N(0, I))` summed over all entries.
    pub fn kl_std_normal(&mut self, mean: Var, logvar: Var) -> Result<Var> {
        self.same_shape("kl_std_normal", mean, logvar)?;
        Ok(self.push(Op::KlStdNormal { mean, logvar }, (1, 1), &[mean, logvar]))
    }

    /// Isotropic Gaussian tuning: `out[r, a] = scale * exp(-|x_r - c_a|^2 / (2 sigma))`
    /// for stimuli rows `x` and constant center rows `c`. With `absent_zero`, an
    /// all-zero stimulus row yields an all-zero activation row.
    pub fn gaussian(&mut self, x: Var, centers: Arc<Tensor<T>>, sigma: T, scale: T, absent_zero: bool) -> Result<Var> {
        let (n, d) = self.shape(x);
        if centers.cols() != d {
            return Err(Error::InvalidOperand {
                op: "gaussian",
                node: self.info(x),
                reason: format!("centers have dimension {}, stimuli {d}", centers.cols()),
            });
        }
        if !(sigma > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "gaussian sigma must be > 0, got {sigma}"
            )));
        }
        let k = centers.rows();
        let inv_two_sigma = T::one() / (T::lit(2.0) * sigma);
        Ok(self.push(
            Op::Gaussian {
                x,
                centers,
                inv_two_sigma,
                scale,
                absent_zero,
            },
            (n, k),
            &[x],
        ))
    }

    /// Rotation matrix from angles: a `1 x 1` angle gives a planar 2x2
    /// counterclockwise rotation, a `1 x 3` row gives `Rx(ax) Ry(ay) Rz(az)`.
    pub fn euler_rotation(&mut self, angles: Var) -> Result<Var> {
        let d = match self.shape(angles) {
            (1, 1) => 2,
            (1, 3) => 3,
            _ => {
                return Err(Error::InvalidOperand {
                    op: "euler_rotation",
                    node: self.info(angles),
                    reason: "expected 1x1 or 1x3 angles".into(),
                })
            }
        };
        Ok(self.push(Op::Euler(angles), (d, d), &[angles]))
    }

    /// Reverse pass from a scalar `root`. Every leaf with `requires_grad`
    /// receives `d root / d leaf` (zeros when the root does not depend on it).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.stale {
            return Err(Error::StaleGraph);
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::NonScalarRoot(self.info(root)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        if self.rg(root) {
            grads[root.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(self.info(Var(i))));
            }
            self.propagate(i, &g, &mut grads);
            for p in node.op.parents() {
                if grads[p.0].as_ref().is_some_and(|pg| !pg.is_finite()) {
                    return Err(Error::NonFinite(self.info(Var(i))));
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &grads[i] {
                    Some(g) if !g.is_finite() => return Err(Error::NonFinite(self.info(Var(i)))),
                    Some(_) => {}
                    None => {
                        let (r, c) = node.value.shape();
                        grads[i] = Some(Tensor::zeros(r, c));
                    }
                }
            } else if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let two = T::lit(2.0);
        let half = T::lit(0.5);
        let gd = g.data();

        // Accumulates into the gradient buffer of `v` via `f(buffer)`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let (r, c) = self.nodes[v.0].value.shape();
                *slot = Some(Tensor::zeros(r, c));
            }
            f(slot.as_mut().unwrap().data_mut());
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(gd).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(x, &d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(gd).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gd[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += gd[k] * av[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(gd).for_each(|(x, &d)| *x += *s * d)),
            Op::AddScalar(a, _) | Op::Reshape(a) | Op::Sum(a) => {
                let broadcast = matches!(node.op, Op::Sum(_));
                acc(*a, &mut |ga| {
                    if broadcast {
                        ga.iter_mut().for_each(|x| *x += gd[0]);
                    } else {
                        ga.iter_mut().zip(gd).for_each(|(x, &d)| *x += d);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).shape();
                let (_, n) = val(*b).shape();
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| matmul_nt_into(gd, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(av, gd, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gd[j * r + i];
                        }
                    }
                })
            }
            Op::AddRow(x, row) => {
                let k = y.cols();
                acc(*x, &mut |gx| gx.iter_mut().zip(gd).for_each(|(v, &d)| *v += d));
                acc(*row, &mut |gr| {
                    for (idx, &d) in gd.iter().enumerate() {
                        gr[idx % k] += d;
                    }
                });
            }
            Op::AffineCols { x, scale, .. } => {
                let k = y.cols();
                acc(*x, &mut |gx| {
                    for (idx, &d) in gd.iter().enumerate() {
                        gx[idx] += d * scale[idx % k];
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for (k, yv) in y.data().iter().enumerate() {
                    ga[k] += gd[k] * (T::one() - *yv * *yv);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for (k, yv) in y.data().iter().enumerate() {
                    ga[k] += gd[k] * *yv * (T::one() - *yv);
                }
            }),
            Op::Softplus(a) => {
                let xv = val(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gd[k] * sigmoid(xv[k]);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for (k, yv) in y.data().iter().enumerate() {
                    ga[k] += gd[k] * *yv;
                }
            }),
            Op::Ln(a) => {
                let xv = val(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gd[k] / xv[k];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for (k, yv) in y.data().iter().enumerate() {
                    ga[k] += gd[k] / (two * *yv);
                }
            }),
            Op::Square(a) => {
                let xv = val(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gd[k] * two * xv[k];
                    }
                })
            }
            Op::RowNorm(a) => {
                let xv = val(*a);
                let c = xv.cols();
                acc(*a, &mut |ga| {
                    for r in 0..xv.rows() {
                        let nrm = y.data()[r];
                        if nrm > T::zero() {
                            for j in 0..c {
                                ga[r * c + j] += gd[r] * xv.get(r, j) / nrm;
                            }
                        }
                    }
                })
            }
            Op::NormalizeRows { x, .. } => {
                let c = y.cols();
                let norms = &node.aux;
                acc(*x, &mut |gx| {
                    for r in 0..y.rows() {
                        let nrm = norms[r];
                        if nrm == T::zero() {
                            continue;
                        }
                        let yr = y.row_slice(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - dot * yr[j]) / nrm;
                        }
                    }
                })
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let s = gd[0] * two;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += s * (av[k] - bv[k]);
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] -= s * (av[k] - bv[k]);
                    }
                });
            }
            Op::Bce { prob, target } => {
                let (pv, tv) = (val(*prob).data(), val(*target).data());
                let lo = T::lit(BCE_CLAMP);
                let hi = T::one() - lo;
                acc(*prob, &mut |gp| {
                    for k in 0..gp.len() {
                        let p = pv[k];
                        if p > lo && p < hi {
                            gp[k] += gd[0] * (p - tv[k]) / (p * (T::one() - p));
                        }
                    }
                });
                acc(*target, &mut |gt| {
                    for k in 0..gt.len() {
                        let p = clamp(pv[k], lo, hi);
                        gt[k] += gd[0] * ((T::one() - p).ln() - p.ln());
                    }
                });
            }
            Op::BceLogits { logits, target } => {
                let (zv, tv) = (val(*logits).data(), val(*target).data());
                acc(*logits, &mut |gz| {
                    for k in 0..gz.len() {
                        gz[k] += gd[0] * (sigmoid(zv[k]) - tv[k]);
                    }
                })
            }
            Op::KlStdNormal { mean, logvar } => {
                let (mv, lv) = (val(*mean).data(), val(*logvar).data());
                acc(*mean, &mut |gm| {
                    for k in 0..gm.len() {
                        gm[k] += gd[0] * mv[k];
                    }
                });
                acc(*logvar, &mut |gl| {
                    for k in 0..gl.len() {
                        gl[k] += gd[0] * half * (lv[k].exp() - T::one());
                    }
                });
            }
            Op::Gaussian {
                x,
                centers,
                inv_two_sigma,
                ..
            } => {
                let xv = val(*x);
                let (n, d) = xv.shape();
                let kc = centers.rows();
                let coef = -two * *inv_two_sigma;
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        let xr = xv.row_slice(r);
                        for a in 0..kc {
                            let w = gd[r * kc + a] * y.data()[r * kc + a];
                            if w == T::zero() {
                                continue;
                            }
                            let ca = centers.row_slice(a);
                            for j in 0..d {
                                gx[r * d + j] += w * coef * (xr[j] - ca[j]);
                            }
                        }
                    }
                })
            }
            Op::Euler(angles) => {
                let av = val(*angles).data();
                let derivs = rotation_derivatives(av);
                acc(*angles, &mut |ga| {
                    for (k, dm) in derivs.iter().enumerate() {
                        ga[k] += dm.iter().zip(gd).map(|(&a, &b)| a * b).sum::<T>();
                    }
                })
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    x.max(lo).min(hi)
}

#[inline]
fn xlogx<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x * x.ln()
    } else {
        T::zero()
    }
}

fn axis_rotation<T: Scalar>(axis: usize, a: T) -> [T; 9] {
    let (s, c) = a.sin_cos();
    let (o, z) = (T::one(), T::zero());
    match axis {
        0 => [o, z, z, z, c, -s, z, s, c],
        1 => [c, z, s, z, o, z, -s, z, c],
        _ => [c, -s, z, s, c, z, z, z, o],
    }
}

fn axis_rotation_derivative<T: Scalar>(axis: usize, a: T) -> [T; 9] {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    match axis {
        0 => [z, z, z, z, -s, -c, z, c, -s],
        1 => [-s, z, c, z, z, z, -c, z, -s],
        _ => [-s, -c, z, c, -s, z, z, z, z],
    }
}

fn mat3_mul<T: Scalar>(a: &[T; 9], b: &[T; 9]) -> [T; 9] {
    let mut out = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    out
}

/// Row-major rotation matrix for 1 (planar) or 3 (Rx Ry Rz) angles.
pub(crate) fn rotation_matrix<T: Scalar>(angles: &[T]) -> Vec<T> {
    if angles.len() == 1 {
        let (s, c) = angles[0].sin_cos();
        return vec![c, -s, s, c];
    }
    let rx = axis_rotation(0, angles[0]);
    let ry = axis_rotation(1, angles[1]);
    let rz = axis_rotation(2, angles[2]);
    mat3_mul(&mat3_mul(&rx, &ry), &rz).to_vec()
}

fn rotation_derivatives<T: Scalar>(angles: &[T]) -> Vec<Vec<T>> {
    if angles.len() == 1 {
        let (s, c) = angles[0].sin_cos();
        return vec![vec![-s, -c, c, -s]];
    }
    let r = [
        axis_rotation(0, angles[0]),
        axis_rotation(1, angles[1]),
        axis_rotation(2, angles[2]),
    ];
    (0..3)
        .map(|k| {
            let mut f = r;
            f[k] = axis_rotation_derivative(k, angles[k]);
            mat3_mul(&mat3_mul(&f[0], &f[1]), &f[2]).to_vec()
        })
        .collect()
}

fn eval<T: Scalar>(op: &Op<T>, nodes: &[Node<T>], out: &mut Tensor<T>, aux: &mut Vec<T>) {
    let val = |v: &Var| &nodes[v.0].value;
    let o = out.data_mut();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => zip_into(o, val(a).data(), val(b).data(), |x, y| x + y),
        Op::Sub(a, b) => zip_into(o, val(a).data(), val(b).data(), |x, y| x - y),
        Op::Mul(a, b) => zip_into(o, val(a).data(), val(b).data(), |x, y| x * y),
        Op::Scale(a, s) => map_into(o, val(a).data(), |x| x * *s),
        Op::AddScalar(a, s) => map_into(o, val(a).data(), |x| x + *s),
        Op::MatMul(a, b) => {
            let (m, k) = val(a).shape();
            let n = val(b).cols();
            o.iter_mut().for_each(|x| *x = T::zero());
            matmul_into(val(a).data(), val(b).data(), o, m, k, n);
        }
        Op::Transpose(a) => {
            let av = val(a);
            let (r, c) = av.shape();
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = av.get(i, j);
                }
            }
        }
        Op::AddRow(x, row) => {
            let rv = val(row).data();
            let k = rv.len();
            for (idx, (dst, &src)) in o.iter_mut().zip(val(x).data()).enumerate() {
                *dst = src + rv[idx % k];
            }
        }
        Op::AffineCols { x, scale, shift } => {
            let k = scale.len();
            for (idx, (dst, &src)) in o.iter_mut().zip(val(x).data()).enumerate() {
                *dst = src * scale[idx % k] + shift[idx % k];
            }
        }
        Op::Tanh(a) => map_into(o, val(a).data(), |x| x.tanh()),
        Op::Sigmoid(a) => map_into(o, val(a).data(), sigmoid),
        Op::Softplus(a) => map_into(o, val(a).data(), softplus),
        Op::Exp(a) => map_into(o, val(a).data(), |x| x.exp()),
        Op::Ln(a) => map_into(o, val(a).data(), |x| x.ln()),
        Op::Sqrt(a) => map_into(o, val(a).data(), |x| x.sqrt()),
        Op::Square(a) => map_into(o, val(a).data(), |x| x * x),
        Op::Sum(a) => o[0] = val(a).sum(),
        Op::Reshape(a) => o.copy_from_slice(val(a).data()),
        Op::RowNorm(a) => {
            let av = val(a);
            for r in 0..av.rows() {
                o[r] = av.row_slice(r).iter().map(|&x| x * x).sum::<T>().sqrt();
            }
        }
        Op::NormalizeRows { x, eps } => {
            let xv = val(x);
            let c = xv.cols();
            aux.clear();
            for r in 0..xv.rows() {
                let row = xv.row_slice(r);
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if nrm < *eps {
                    aux.push(T::zero());
                    o[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = T::zero());
                } else {
                    aux.push(nrm);
                    for j in 0..c {
                        o[r * c + j] = row[j] / nrm;
                    }
                }
            }
        }
        Op::SquaredError(a, b) => {
            o[0] = val(a)
                .data()
                .iter()
                .zip(val(b).data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
        }
        Op::Bce { prob, target } => {
            let lo = T::lit(BCE_CLAMP);
            let hi = T::one() - lo;
            o[0] = val(prob)
                .data()
                .iter()
                .zip(val(target).data())
                .map(|(&p, &t)| {
                    let p = clamp(p, lo, hi);
                    -(t * p.ln()) - (T::one() - t) * (T::one() - p).ln()
                })
                .sum();
        }
        Op::BceLogits { logits, target } => {
            o[0] = val(logits)
                .data()
                .iter()
                .zip(val(target).data())
                .map(|(&z, &t)| {
                    let tc = clamp(t, T::zero(), T::one());
                    softplus(z) - t * z + xlogx(tc) + xlogx(T::one() - tc)
                })
                .sum();
        }
        Op::KlStdNormal { mean, logvar } => {
            let half = T::lit(0.5);
            o[0] = val(mean)
                .data()
                .iter()
                .zip(val(logvar).data())
                .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
                .sum();
        }
        Op::Gaussian {
            x,
            centers,
            inv_two_sigma,
            scale,
            absent_zero,
        } => {
            let xv = val(x);
            let (n, d) = xv.shape();
            let k = centers.rows();
            for r in 0..n {
                let xr = xv.row_slice(r);
                let absent = *absent_zero && xr.iter().all(|v| *v == T::zero());
                for a in 0..k {
                    o[r * k + a] = if absent {
                        T::zero()
                    } else {
                        let ca = centers.row_slice(a);
                        let d2: T = (0..d).map(|j| (xr[j] - ca[j]) * (xr[j] - ca[j])).sum();
                        *scale * (-d2 * *inv_two_sigma).exp()
                    };
                }
            }
        }
        Op::Euler(angles) => {
            o.copy_from_slice(&rotation_matrix(val(angles).data()));
        }
    }
}

#[inline]
fn zip_into<T: Scalar>(o: &mut [T], a: &[T], b: &[T], f: impl Fn(T, T) -> T) {
    for ((dst, &x), &y) in o.iter_mut().zip(a).zip(b) {
        *dst = f(x, y);
    }
}

#[inline]
fn map_into<T: Scalar>(o: &mut [T], a: &[T], f: impl Fn(T) -> T) {
    for (dst, &x) in o.iter_mut().zip(a) {
        *dst = f(x);
    }
}
