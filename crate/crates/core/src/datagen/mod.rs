//! Motion data: double pendulum, synthetic walker, CSV ingestion and
//! rigid test-time disturbances.

mod pendulum;
mod sequence;
mod walker;

pub use pendulum::{simulate_pendulum, PendulumParams, PendulumState};
pub use sequence::{invert_permutation, validate_permutation, CsvLayout, FeatureSequence, SequenceMeta};
pub use walker::{generate_walker, WalkerParams, WALKER_JOINTS};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::perspective::rotation_from_euler;
use crate::scalar::Scalar;

/// Constant rigid transform `x -> A x + t` applied to every frame, where `A`
/// follows the Euler convention of [`crate::perspective`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSpec {
    /// Degrees about x, y, z. Planar scenes use only the z entry.
    pub rotation_deg: [f64; 3],
    /// Scene units; 2 or 3 entries, empty for none.
    pub translation: Vec<f64>,
}

impl DisturbanceSpec {
    pub fn angles_rad(&self, dim: usize) -> Vec<f64> {
        if dim == 2 {
            vec![self.rotation_deg[2].to_radians()]
        } else {
            self.rotation_deg.iter().map(|a| a.to_radians()).collect()
        }
    }

    pub fn rotation<T: Scalar>(&self, dim: usize) -> Tensor<T> {
        let angles: Vec<T> = self.angles_rad(dim).into_iter().map(T::lit).collect();
        rotation_from_euler(&angles)
    }

    pub fn translation_vec(&self, dim: usize) -> Result<Vec<f64>> {
        match self.translation.len() {
            0 => Ok(vec![0.0; dim]),
            n if n == dim => Ok(self.translation.clone()),
            n => Err(Error::Dimension {
                expected: format!("{dim} translation components"),
                got: n.to_string(),
            }),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg.iter().all(|&a| a == 0.0) && self.translation.iter().all(|&t| t == 0.0)
    }
}

/// Applies one rigid transform to all frames.
pub fn apply_disturbance<T: Scalar>(seq: &FeatureSequence<T>, spec: &DisturbanceSpec) -> Result<FeatureSequence<T>> {
    let d = seq.dim();
    if d == 2 && (spec.rotation_deg[0] != 0.0 || spec.rotation_deg[1] != 0.0) {
        return Err(Error::InvalidParameter(
            "planar sequences accept only an in-plane (z) rotation".into(),
        ));
    }
    if spec.is_identity() {
        return Ok(seq.clone());
    }
    let a = spec.rotation::<T>(d);
    let t: Vec<T> = spec.translation_vec(d)?.into_iter().map(T::lit).collect();
    Ok(seq.map_frames(|f| {
        Tensor::from_fn(f.rows(), d, |i, r| {
            (0..d).map(|k| a.get(r, k) * f.get(i, k)).sum::<T>() + t[r]
        })
    }))
}
