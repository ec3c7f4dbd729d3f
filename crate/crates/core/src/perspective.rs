//! Rigid-transform front end: Euler-angle rotation, translation bias and the
//! position / direction / magnitude sub-modalities.
//!
//! Convention: right-handed axes, counterclockwise-positive angles, and
//! `R = Rx(ax) Ry(ay) Rz(az)` applied to column vectors. A planar pose has one
//! angle about the out-of-plane axis.

use serde::{Deserialize, Serialize};

use crate::diffcore::{rotation_matrix, Tensor};
use crate::error::{Error, Result};
use crate::momentum::Momentum;
use crate::scalar::Scalar;

/// Velocities with a norm below this have no direction.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Euler angles and translation bias of the observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    angles: Vec<T>,
    translation: Vec<T>,
    angle_history: Momentum<T>,
    translation_history: Momentum<T>,
}

impl<T: Scalar> Pose<T> {
    /// Zero angles and zero translation for a `dim`-dimensional scene.
    pub fn identity(dim: usize) -> Result<Self> {
        let n_angles = match dim {
            2 => 1,
            3 => 3,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "pose dimension must be 2 or 3, got {dim}"
                )))
            }
        };
        Ok(Self {
            angles: vec![T::zero(); n_angles],
            translation: vec![T::zero(); dim],
            angle_history: Momentum::default(),
            translation_history: Momentum::default(),
        })
    }

    pub fn new(angles: Vec<T>, translation: Vec<T>) -> Result<Self> {
        let mut pose = Self::identity(translation.len())?;
        if angles.len() != pose.angles.len() {
            return Err(Error::Dimension {
                expected: format!("{} angles", pose.angles.len()),
                got: angles.len().to_string(),
            });
        }
        pose.angles = angles;
        pose.translation = translation;
        Ok(pose)
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    /// Radians: `[ax, ay, az]`, or `[a]` in the plane.
    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn translation(&self) -> &[T] {
        &self.translation
    }

    pub fn rotation(&self) -> Tensor<T> {
        rotation_from_euler(&self.angles)
    }

    pub fn angle_history(&self) -> &Momentum<T> {
        &self.angle_history
    }

    pub fn translation_history(&self) -> &Momentum<T> {
        &self.translation_history
    }

    /// Applies `P = R x + b` to every row of `x`.
    pub fn transform(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_dim(x, self.dim())?;
        let r = self.rotation();
        Ok(Tensor::from_fn(x.rows(), x.cols(), |i, a| {
            (0..x.cols()).map(|k| r.get(a, k) * x.get(i, k)).sum::<T>() + self.translation[a]
        }))
    }
}

/// Rotation matrix for one planar or three spatial Euler angles.
pub fn rotation_from_euler<T: Scalar>(angles: &[T]) -> Tensor<T> {
    assert!(
        angles.len() == 1 || angles.len() == 3,
        "rotation needs 1 or 3 angles, got {}",
        angles.len()
    );
    let d = if angles.len() == 1 { 2 } else { 3 };
    Tensor::new(d, d, rotation_matrix(angles)).expect("rotation shape")
}

/// `(R^T R - I)` max-abs deviation.
pub fn orthonormality_error<T: Scalar>(r: &Tensor<T>) -> T {
    let rtr = r.transpose().matmul(r).expect("square");
    let mut worst = T::zero();
    for i in 0..r.rows() {
        for j in 0..r.cols() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((rtr.get(i, j) - target).abs());
        }
    }
    worst
}

/// Per-feature sub-modalities of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmodalFrame<T> {
    /// `N x D` positions `R x + b`.
    pub position: Tensor<T>,
    /// `N x D` unit directions; all-zero rows where the direction is absent.
    pub direction: Tensor<T>,
    /// `N x 1` speeds.
    pub magnitude: Tensor<T>,
    pub direction_present: Vec<bool>,
}

/// Position, direction and magnitude of each feature under `pose`.
pub fn extract_submodal<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, pose: &Pose<T>) -> Result<SubmodalFrame<T>> {
    check_dim(x, pose.dim())?;
    if v.shape() != x.shape() {
        return Err(Error::Dimension {
            expected: format!("velocity of shape {:?}", x.shape()),
            got: format!("{:?}", v.shape()),
        });
    }
    let position = pose.transform(x)?;
    let r = pose.rotation();
    let (n, d) = x.shape();
    let rv = Tensor::from_fn(n, d, |i, a| (0..d).map(|k| r.get(a, k) * v.get(i, k)).sum::<T>());
    let mut direction = Tensor::zeros(n, d);
    let mut magnitude = Tensor::zeros(n, 1);
    let mut present = vec![false; n];
    for i in 0..n {
        let m = rv.row_slice(i).iter().map(|&c| c * c).sum::<T>().sqrt();
        magnitude.set(i, 0, m);
        if m >= T::lit(DIRECTION_EPS) {
            present[i] = true;
            for a in 0..d {
                direction.set(i, a, rv.get(i, a) / m);
            }
        }
    }
    Ok(SubmodalFrame {
        position,
        direction,
        magnitude,
        direction_present: present,
    })
}

/// Momentum rates for the two pose parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRates {
    pub eta_rotation: f64,
    pub gamma_rotation: f64,
    pub eta_translation: f64,
    pub gamma_translation: f64,
}

/// One momentum step on the enabled pose groups. `None` gradients leave
/// their group bit-identical. Nothing changes if any gradient is non-finite.
pub fn adapt_pose<T: Scalar>(
    pose: &mut Pose<T>,
    grad_angles: Option<&[T]>,
    grad_translation: Option<&[T]>,
    rates: &PoseRates,
) -> Result<()> {
    for (name, g) in [("angles", grad_angles), ("translation", grad_translation)] {
        if let Some(i) = g.and_then(|g| g.iter().position(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(format!("pose {name}[{i}]")));
        }
    }
    if let Some(g) = grad_angles {
        pose.angle_history.apply(
            "pose angles",
            &mut pose.angles,
            g,
            T::lit(rates.eta_rotation),
            T::lit(rates.gamma_rotation),
        )?;
    }
    if let Some(g) = grad_translation {
        pose.translation_history.apply(
            "pose translation",
            &mut pose.translation,
            g,
            T::lit(rates.eta_translation),
            T::lit(rates.gamma_translation),
        )?;
    }
    Ok(())
}

fn check_dim<T: Scalar>(x: &Tensor<T>, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::Dimension {
            expected: format!("{dim}-dimensional points"),
            got: format!("{} columns", x.cols()),
        });
    }
    Ok(())
}
