use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gestaltvae::{vae_graph, GestaltModel, ReconLoss, SUBMODALITIES};
use crate::perspective::{Pose, DIRECTION_EPS};
use crate::popcode::{Coding, Encoder, LatticeKind};
use crate::scalar::Scalar;

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    /// `[L_p, L_d, L_m]`
    pub parts: [f64; 3],
    /// `beta_p L_p + beta_d L_d + beta_m L_m`
    pub total: f64,
}

/// How a sub-modal loss aggregates over Gestalt units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    /// Sum divided by the number of units.
    #[default]
    Mean,
}

/// Which scalar to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossRoot {
    Total,
    Part(LatticeKind),
}

/// Gradients with respect to every parametric bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasGradients<T> {
    /// `N x M`
    pub binding: Tensor<T>,
    pub angles: Vec<T>,
    pub translation: Vec<T>,
}

/// The full pose -> sub-modalities -> encoding -> binding -> autoencoder ->
/// loss graph, recorded once and re-run per frame.
#[derive(Debug, Clone)]
pub struct LossPipeline<T> {
    tape: Tape<T>,
    x: Var,
    v: Var,
    angles: Var,
    translation: Var,
    bias: Var,
    parts: [Var; 3],
    total: Var,
    n: usize,
    m: usize,
    dim: usize,
}

fn encode<T: Scalar>(tape: &mut Tape<T>, encoder: &Encoder<T>, kind: LatticeKind, stim: Var) -> Result<Var> {
    match encoder.coding() {
        Coding::Population => {
            let lattice = encoder.lattice(kind);
            tape.gaussian(
                stim,
                lattice.centers().clone(),
                T::lit(lattice.sigma()),
                T::one(),
                kind == LatticeKind::Direction,
            )
        }
        Coding::Raw => {
            let aff = encoder.raw_affine(kind);
            tape.affine_cols(
                stim,
                aff.scale.into_iter().map(T::lit).collect(),
                aff.shift.into_iter().map(T::lit).collect(),
            )
        }
    }
}

impl<T: Scalar> LossPipeline<T> {
    /// Graph for `n` observed features of the model's dimensionality.
    pub fn new(
        model: &GestaltModel<T>,
        n: usize,
        loss: ReconLoss,
        reduction: Reduction,
        betas: [f64; 3],
    ) -> Result<Self> {
        let (m, dim) = (model.slots, model.dim);
        if n == 0 {
            return Err(Error::InvalidParameter(
                "pipeline needs at least one observed feature".into(),
            ));
        }
        let n_angles = if dim == 2 { 1 } else { 3 };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(n, dim));
        let v = tape.constant(Tensor::zeros(n, dim));
        let angles = tape.param(Tensor::zeros(1, n_angles));
        let translation = tape.param(Tensor::zeros(1, dim));
        let bias = tape.param(Tensor::zeros(n, m));

        let r = tape.euler_rotation(angles)?;
        let rt = tape.transpose(r);
        let xr = tape.matmul(x, rt)?;
        let position = tape.add_row(xr, translation)?;
        let vr = tape.matmul(v, rt)?;
        let direction = tape.normalize_rows(vr, T::lit(DIRECTION_EPS));
        // |R v| = |v| for orthonormal R; taking it from v keeps the
        // magnitude path exactly independent of the pose
        let magnitude = tape.row_norm(v);

        let w = tape.sigmoid(bias);
        let wt = tape.transpose(w);
        let mut parts = Vec::with_capacity(3);
        for (k, (kind, stim)) in SUBMODALITIES.iter().zip([position, direction, magnitude]).enumerate() {
            let a = encode(&mut tape, &model.encoder, *kind, stim)?;
            let g = tape.matmul(wt, a)?;
            let width = m * model.encoder.width(*kind);
            let g = tape.reshape(g, 1, width)?;
            if model.vaes[k].input() != width {
                return Err(Error::Dimension {
                    expected: format!("{} {} units", model.vaes[k].input(), kind.name()),
                    got: width.to_string(),
                });
            }
            let params: Vec<Var> = model.vaes[k].tensors.iter().map(|t| tape.constant(t.clone())).collect();
            let graph = vae_graph(&mut tape, &params, g, None)?;
            let part = match loss {
                ReconLoss::SquaredError => tape.squared_error(graph.recon, g)?,
                ReconLoss::Bce => tape.bce(graph.recon, g)?,
            };
            parts.push(match reduction {
                Reduction::Sum => part,
                Reduction::Mean => tape.scale(part, T::one() / T::lit(width as f64)),
            });
        }
        let parts: [Var; 3] = [parts[0], parts[1], parts[2]];
        let weighted: Vec<Var> = parts
            .iter()
            .zip(betas)
            .map(|(&p, b)| tape.scale(p, T::lit(b)))
            .collect();
        let sum = tape.add(weighted[0], weighted[1])?;
        let total = tape.add(sum, weighted[2])?;
        Ok(Self {
            tape,
            x,
            v,
            angles,
            translation,
            bias,
            parts,
            total,
            n,
            m,
            dim,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn load(&mut self, bias: &Tensor<T>, pose: &Pose<T>, x: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        if pose.dim() != self.dim {
            return Err(Error::Dimension {
                expected: format!("{}-dimensional pose", self.dim),
                got: pose.dim().to_string(),
            });
        }
        self.tape.set_value(self.x, x)?;
        self.tape.set_value(self.v, v)?;
        self.tape.set_value(self.bias, bias)?;
        self.tape.set_value(self.angles, &Tensor::row(pose.angles().to_vec()))?;
        self.tape
            .set_value(self.translation, &Tensor::row(pose.translation().to_vec()))?;
        Ok(())
    }

    fn values(&self) -> LossValues {
        let item = |v: Var| self.tape.value(v).item().to_f64_lossy();
        LossValues {
            parts: self.parts.map(item),
            total: item(self.total),
        }
    }

    /// Loss of frame `x` with velocity `v` under the given biases.
    pub fn evaluate(&mut self, bias: &Tensor<T>, pose: &Pose<T>, x: &Tensor<T>, v: &Tensor<T>) -> Result<LossValues> {
        self.load(bias, pose, x, v)?;
        self.tape.forward(self.total)?;
        Ok(self.values())
    }

    /// Loss values and the gradient of `root` with respect to all biases.
    pub fn gradients(
        &mut self,
        bias: &Tensor<T>,
        pose: &Pose<T>,
        x: &Tensor<T>,
        v: &Tensor<T>,
        root: LossRoot,
    ) -> Result<(LossValues, BiasGradients<T>)> {
        let values = self.evaluate(bias, pose, x, v)?;
        Ok((values, self.current_gradients(root)?))
    }

    /// Gradient of `root` at the most recent [`Self::evaluate`].
    pub fn current_gradients(&self, root: LossRoot) -> Result<BiasGradients<T>> {
        let root = match root {
            LossRoot::Total => self.total,
            LossRoot::Part(kind) => self.parts[SUBMODALITIES.iter().position(|&k| k == kind).unwrap()],
        };
        let g = self.tape.backward(root)?;
        Ok(BiasGradients {
            binding: g.expect(self.bias).clone(),
            angles: g.expect(self.angles).data().to_vec(),
            translation: g.expect(self.translation).data().to_vec(),
        })
    }
}
