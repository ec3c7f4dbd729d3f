//! Retrospective inference: stream a sequence through a trained model and
//! adapt binding and pose biases by backpropagating the reconstruction loss.

mod metrics;
mod pipeline;

pub use metrics::{discrepancy, od, td, Discrepancy, InferenceTarget, OdReading, ORTHONORMAL_TOL};
pub use pipeline::{BiasGradients, LossPipeline, LossRoot, LossValues, Reduction};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::binding::{adapt_binding, init_binding, BindingMode, BindingState, FbeVariant, DEFAULT_INFERENCE_BIAS};
use crate::datagen::FeatureSequence;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gestaltvae::{GestaltModel, ReconLoss};
use crate::perspective::{adapt_pose, Pose, PoseRates};
use crate::scalar::Scalar;

/// Bias groups adapted during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Groups {
    pub binding: bool,
    pub rotation: bool,
    pub translation: bool,
}

impl Groups {
    pub const BINDING: Self = Self {
        binding: true,
        rotation: false,
        translation: false,
    };
    pub const PERSPECTIVE: Self = Self {
        binding: false,
        rotation: true,
        translation: true,
    };
    pub const ALL: Self = Self {
        binding: true,
        rotation: true,
        translation: true,
    };
}

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Loss weights for posture, direction, magnitude.
    pub betas: [f64; 3],
    pub eta_binding: f64,
    pub gamma_binding: f64,
    pub eta_rotation: f64,
    pub gamma_rotation: f64,
    pub eta_translation: f64,
    pub gamma_translation: f64,
    pub groups: Groups,
    pub loss: ReconLoss,
    pub reduction: Reduction,
    /// Frames processed; the sequence is cycled as needed.
    pub steps: usize,
    /// Uniform starting bias for adaptable bindings.
    pub binding_init: f64,
    pub fbe_variant: FbeVariant,
    pub od_reading: OdReading,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            betas: [1.0; 3],
            eta_binding: 1.0,
            gamma_binding: 0.9,
            eta_rotation: 1e-2,
            gamma_rotation: 0.9,
            eta_translation: 8e-2,
            gamma_translation: 0.9,
            groups: Groups::default(),
            loss: ReconLoss::default(),
            reduction: Reduction::default(),
            steps: 1000,
            binding_init: DEFAULT_INFERENCE_BIAS,
            fbe_variant: FbeVariant::default(),
            od_reading: OdReading::default(),
        }
    }
}

impl InferenceConfig {
    pub fn pose_rates(&self) -> PoseRates {
        PoseRates {
            eta_rotation: self.eta_rotation,
            gamma_rotation: self.gamma_rotation,
            eta_translation: self.eta_translation,
            gamma_translation: self.gamma_translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("eta_binding", self.eta_binding),
            ("gamma_binding", self.gamma_binding),
            ("eta_rotation", self.eta_rotation),
            ("gamma_rotation", self.gamma_rotation),
            ("eta_translation", self.eta_translation),
            ("gamma_translation", self.gamma_translation),
        ];
        for (name, v) in rates.iter().chain(&[
            ("beta_p", self.betas[0]),
            ("beta_d", self.betas[1]),
            ("beta_m", self.betas[2]),
        ]) {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.binding_init.is_finite() {
            return Err(Error::InvalidParameter("binding_init must be finite".into()));
        }
        Ok(())
    }
}

/// One processed frame: the loss that drove the update and the
/// discrepancies of the state the update produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub frame: usize,
    pub loss: f64,
    pub loss_p: f64,
    pub loss_d: f64,
    pub loss_m: f64,
    pub fbe: f64,
    pub od: f64,
    pub td: f64,
    pub td_cm: f64,
}

/// Per-step log plus the discrepancies before the first update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub initial: Discrepancy,
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    /// Discrepancies after the last update (the initial ones for an empty log).
    pub fn last(&self) -> Discrepancy {
        self.rows.last().map_or(self.initial, |r| Discrepancy {
            fbe: r.fbe,
            od: r.od,
            td: r.td,
            td_cm: r.td_cm,
        })
    }

    /// Discrepancies after `step` updates; 0 is the initial state.
    pub fn at(&self, step: usize) -> Option<Discrepancy> {
        if step == 0 {
            return Some(self.initial);
        }
        self.rows.get(step - 1).map(|r| Discrepancy {
            fbe: r.fbe,
            od: r.od,
            td: r.td,
            td_cm: r.td_cm,
        })
    }

    /// `step,frame,L,L_p,L_d,L_m,FBE,OD,TD,TD_cm`; step 0 holds the initial
    /// discrepancies with empty loss cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.into());
        wr.write_record(["step", "frame", "L", "L_p", "L_d", "L_m", "FBE", "OD", "TD", "TD_cm"])
            .map_err(io)?;
        let i = &self.initial;
        wr.write_record([
            "0",
            "",
            "",
            "",
            "",
            "",
            &i.fbe.to_string(),
            &i.od.to_string(),
            &i.td.to_string(),
            &i.td_cm.to_string(),
        ])
        .map_err(io)?;
        for r in &self.rows {
            wr.write_record([
                (r.step + 1).to_string(),
                r.frame.to_string(),
                r.loss.to_string(),
                r.loss_p.to_string(),
                r.loss_d.to_string(),
                r.loss_m.to_string(),
                r.fbe.to_string(),
                r.od.to_string(),
                r.td.to_string(),
                r.td_cm.to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Writes `step,angle_0..,b_0..` for a pose trajectory.
pub fn write_pose_csv<T: Scalar>(poses: &[Pose<T>], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    if let Some(p) = poses.first() {
        let mut header = vec!["step".to_string()];
        header.extend((0..p.angles().len()).map(|i| format!("angle_{i}")));
        header.extend((0..p.dim()).map(|i| format!("b_{i}")));
        wr.write_record(&header).map_err(io)?;
    }
    for (s, p) in poses.iter().enumerate() {
        let mut rec = vec![s.to_string()];
        rec.extend(
            p.angles()
                .iter()
                .chain(p.translation())
                .map(|v| v.to_f64_lossy().to_string()),
        );
        wr.write_record(&rec).map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

/// A run in progress. The model is shared read-only; disabled groups are
/// never written.
#[derive(Debug, Clone)]
pub struct InferenceRun<'m, T> {
    model: &'m GestaltModel<T>,
    pipeline: LossPipeline<T>,
    binding: BindingState<T>,
    pose: Pose<T>,
    config: InferenceConfig,
    target: InferenceTarget,
    step: usize,
    log: MetricLog,
}

impl<'m, T: Scalar> InferenceRun<'m, T> {
    pub fn new(
        model: &'m GestaltModel<T>,
        binding: BindingState<T>,
        pose: Pose<T>,
        config: InferenceConfig,
        target: InferenceTarget,
    ) -> Result<Self> {
        config.validate()?;
        if binding.m() != model.slots {
            return Err(Error::Dimension {
                expected: format!("{} binding slots", model.slots),
                got: binding.m().to_string(),
            });
        }
        let pipeline = LossPipeline::new(model, binding.n(), config.loss, config.reduction, config.betas)?;
        let initial = discrepancy(
            &binding.weights(),
            &pose,
            &target,
            config.fbe_variant,
            config.od_reading,
        )?;
        Ok(Self {
            model,
            pipeline,
            binding,
            pose,
            config,
            target,
            step: 0,
            log: MetricLog {
                initial,
                rows: Vec::new(),
            },
        })
    }

    pub fn model(&self) -> &GestaltModel<T> {
        self.model
    }

    pub fn binding(&self) -> &BindingState<T> {
        &self.binding
    }

    pub fn pose(&self) -> &Pose<T> {
        &self.pose
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    /// Loss of a frame under the current state, without adapting.
    pub fn evaluate(&mut self, x: &Tensor<T>, v: &Tensor<T>) -> Result<LossValues> {
        self.pipeline.evaluate(self.binding.bias(), &self.pose, x, v)
    }

    /// Evaluates frame `x` (velocity `v`), adapts the enabled groups and logs
    /// one row. A non-finite loss halts with the offending state.
    pub fn step(&mut self, frame: usize, x: &Tensor<T>, v: &Tensor<T>) -> Result<&MetricRow> {
        let values = self.pipeline.evaluate(self.binding.bias(), &self.pose, x, v)?;
        if !values.total.is_finite() || values.parts.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss {
                context: format!(
                    "inference step {} (frame {frame}): losses {:?}, angles {:?}, translation {:?}, binding bias {:?}",
                    self.step,
                    values.parts,
                    self.pose.angles(),
                    self.pose.translation(),
                    self.binding.bias().data()
                ),
            });
        }
        let grads = self.pipeline.current_gradients(LossRoot::Total)?;
        let g = self.config.groups;
        if g.binding {
            adapt_binding(
                &mut self.binding,
                &grads.binding,
                self.config.eta_binding,
                self.config.gamma_binding,
            )?;
        }
        if g.rotation || g.translation {
            adapt_pose(
                &mut self.pose,
                g.rotation.then_some(grads.angles.as_slice()),
                g.translation.then_some(grads.translation.as_slice()),
                &self.config.pose_rates(),
            )?;
        }
        let d = discrepancy(
            &self.binding.weights(),
            &self.pose,
            &self.target,
            self.config.fbe_variant,
            self.config.od_reading,
        )?;
        self.log.rows.push(MetricRow {
            step: self.step,
            frame,
            loss: values.total,
            loss_p: values.parts[0],
            loss_d: values.parts[1],
            loss_m: values.parts[2],
            fbe: d.fbe,
            od: d.od,
            td: d.td,
            td_cm: d.td_cm,
        });
        self.step += 1;
        Ok(self.log.rows.last().unwrap())
    }

    /// Streams `config.steps` frames, cycling the sequence end to start.
    pub fn run(mut self, seq: &FeatureSequence<T>) -> Result<InferenceOutcome<T>> {
        self.run_with(seq, |_| ())?;
        Ok(self.finish())
    }

    /// As [`Self::run`], calling `observe` after every step.
    pub fn run_with(&mut self, seq: &FeatureSequence<T>, mut observe: impl FnMut(&Self)) -> Result<()> {
        let frames = FrameCycle::new(seq)?;
        for _ in 0..self.config.steps {
            let (t, x, v) = frames.get(self.step);
            self.step(t, x, &v)?;
            observe(self);
        }
        Ok(())
    }

    pub fn finish(self) -> InferenceOutcome<T> {
        InferenceOutcome {
            log: self.log,
            binding: self.binding,
            pose: self.pose,
        }
    }
}

/// Step `k` sees frame `(k + 1) mod T` with its predecessor, so the wrap
/// from the last frame back to frame 0 is an ordinary step.
struct FrameCycle<'a, T> {
    seq: &'a FeatureSequence<T>,
}

impl<'a, T: Scalar> FrameCycle<'a, T> {
    fn new(seq: &'a FeatureSequence<T>) -> Result<Self> {
        if seq.len() < 2 {
            return Err(Error::InvalidParameter("inference needs at least two frames".into()));
        }
        Ok(Self { seq })
    }

    fn get(&self, k: usize) -> (usize, &'a Tensor<T>, Tensor<T>) {
        let len = self.seq.len();
        let t = (k + 1) % len;
        let x = self.seq.frame(t);
        let prev = self.seq.frame((t + len - 1) % len);
        let v = Tensor::from_fn(x.rows(), x.cols(), |i, a| x.get(i, a) - prev.get(i, a));
        (t, x, v)
    }
}

/// Final states and the metric trajectory of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutcome<T> {
    pub log: MetricLog,
    pub binding: BindingState<T>,
    pub pose: Pose<T>,
}

fn check_sequence<T: Scalar>(model: &GestaltModel<T>, seq: &FeatureSequence<T>) -> Result<()> {
    if seq.dim() != model.dim {
        return Err(Error::Dimension {
            expected: format!("{}-dimensional frames", model.dim),
            got: seq.dim().to_string(),
        });
    }
    Ok(())
}

/// Binding only: uniform adaptable biases, canonical pose.
pub fn infer_binding<T: Scalar>(
    model: &GestaltModel<T>,
    seq: &FeatureSequence<T>,
    config: &InferenceConfig,
    target: InferenceTarget,
) -> Result<InferenceOutcome<T>> {
    check_sequence(model, seq)?;
    let binding = init_binding(
        BindingMode::Inference,
        seq.n_features(),
        model.slots,
        config.binding_init,
    )?;
    let config = InferenceConfig {
        groups: Groups::BINDING,
        ..config.clone()
    };
    InferenceRun::new(model, binding, Pose::identity(model.dim)?, config, target)?.run(seq)
}

/// Pose only: frozen training binding, pose starting at zero.
pub fn infer_perspective<T: Scalar>(
    model: &GestaltModel<T>,
    seq: &FeatureSequence<T>,
    config: &InferenceConfig,
    target: InferenceTarget,
) -> Result<InferenceOutcome<T>> {
    check_sequence(model, seq)?;
    let binding = init_binding(
        BindingMode::Training,
        seq.n_features(),
        model.slots,
        config.binding_init,
    )?;
    let groups = Groups {
        binding: false,
        ..config.groups
    };
    let groups = if groups == Groups::default() {
        Groups::PERSPECTIVE
    } else {
        groups
    };
    let config = InferenceConfig {
        groups,
        ..config.clone()
    };
    InferenceRun::new(model, binding, Pose::identity(model.dim)?, config, target)?.run(seq)
}

/// Binding and pose together from `binding` (uniform adaptable biases when
/// `None`).
pub fn infer_joint<T: Scalar>(
    model: &GestaltModel<T>,
    seq: &FeatureSequence<T>,
    config: &InferenceConfig,
    target: InferenceTarget,
    binding: Option<BindingState<T>>,
) -> Result<InferenceOutcome<T>> {
    check_sequence(model, seq)?;
    let binding = match binding {
        Some(b) => b,
        None => init_binding(
            BindingMode::Inference,
            seq.n_features(),
            model.slots,
            config.binding_init,
        )?,
    };
    let config = InferenceConfig {
        groups: Groups::ALL,
        ..config.clone()
    };
    InferenceRun::new(model, binding, Pose::identity(model.dim)?, config, target)?.run(seq)
}

#[cfg(test)]
mod tests;
