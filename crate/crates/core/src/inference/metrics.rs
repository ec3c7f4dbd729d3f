use serde::{Deserialize, Serialize};

use crate::binding::{fbe, FbeVariant};
use crate::datagen::DisturbanceSpec;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::perspective::{orthonormality_error, Pose};
use crate::scalar::Scalar;

/// Tolerance on `max |R^T R - I|` accepted by [`od`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Degrees-per-radian factor of the orientation difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdReading {
    /// `180 / pi`: the geodesic angle in degrees.
    #[default]
    Geodesic,
    /// `180 / (2 pi)`, half the geodesic angle.
    Literal,
}

/// Geodesic angle between two rotations in degrees. Planar rotations are
/// treated as rotations about z.
pub fn od<T: Scalar>(r_model: &Tensor<T>, r_data: &Tensor<T>, reading: OdReading) -> Result<f64> {
    let d = r_model.rows();
    if r_model.shape() != (d, d) || r_data.shape() != (d, d) || !(d == 2 || d == 3) {
        return Err(Error::Dimension {
            expected: "two 2x2 or 3x3 rotations".into(),
            got: format!("{:?} and {:?}", r_model.shape(), r_data.shape()),
        });
    }
    for (name, r) in [("model", r_model), ("data", r_data)] {
        let e = orthonormality_error(r).to_f64_lossy();
        if !(e <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidParameter(format!(
                "{name} rotation is not orthonormal (|R^T R - I| = {e:e})"
            )));
        }
    }
    let mut trace = (3 - d) as f64;
    for i in 0..d {
        for k in 0..d {
            trace += r_model.get(k, i).to_f64_lossy() * r_data.get(k, i).to_f64_lossy();
        }
    }
    let angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    Ok(match reading {
        OdReading::Geodesic => angle.to_degrees(),
        OdReading::Literal => angle * 180.0 / std::f64::consts::TAU,
    })
}

/// `|b_data - b_model|`
pub fn td(b_model: &[f64], b_data: &[f64]) -> Result<f64> {
    if b_model.len() != b_data.len() {
        return Err(Error::Dimension {
            expected: format!("{} translation components", b_data.len()),
            got: b_model.len().to_string(),
        });
    }
    Ok(b_model
        .iter()
        .zip(b_data)
        .map(|(m, d)| (d - m).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// What a run should converge to. A scene disturbed by `X' = A X + t` is
/// undone by the pose `R = A^T`, `b = -A^T t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTarget {
    /// `assignment[j]` is the observed feature belonging to slot `j`.
    pub assignment: Vec<usize>,
    pub rotation: Vec<Vec<f64>>,
    pub translation: Vec<f64>,
    /// Scene units per meter, for reporting TD in centimeters.
    pub units_per_meter: f64,
}

impl InferenceTarget {
    pub fn new(
        assignment: Vec<usize>,
        dim: usize,
        disturbance: &DisturbanceSpec,
        units_per_meter: f64,
    ) -> Result<Self> {
        let a = disturbance.rotation::<f64>(dim);
        let t = disturbance.translation_vec(dim)?;
        let rotation = (0..dim).map(|r| (0..dim).map(|c| a.get(c, r)).collect()).collect();
        let translation = (0..dim)
            .map(|r| -(0..dim).map(|k| a.get(k, r) * t[k]).sum::<f64>())
            .collect();
        Ok(Self {
            assignment,
            rotation,
            translation,
            units_per_meter,
        })
    }

    pub fn rotation_tensor<T: Scalar>(&self) -> Tensor<T> {
        let d = self.rotation.len();
        Tensor::from_fn(d, d, |r, c| T::lit(self.rotation[r][c]))
    }
}

/// Discrepancies between a state and the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub fbe: f64,
    pub od: f64,
    pub td: f64,
    pub td_cm: f64,
}

pub fn discrepancy<T: Scalar>(
    weights: &Tensor<T>,
    pose: &Pose<T>,
    target: &InferenceTarget,
    fbe_variant: FbeVariant,
    reading: OdReading,
) -> Result<Discrepancy> {
    let b: Vec<f64> = pose.translation().iter().map(|v| v.to_f64_lossy()).collect();
    let td = td(&b, &target.translation)?;
    Ok(Discrepancy {
        fbe: fbe(weights, &target.assignment, fbe_variant)?,
        od: od(&pose.rotation(), &target.rotation_tensor(), reading)?,
        td,
        td_cm: td * 100.0 / target.units_per_meter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perspective::rotation_from_euler;
    use nalgebra::{Matrix3, Rotation3, Vector3};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn euler(a: [f64; 3]) -> Tensor<f64> {
        rotation_from_euler(&a)
    }

    #[test]
    fn od_reference_values() {
        let eye = Tensor::<f64>::identity(3);
        assert_eq!(od(&eye, &eye, OdReading::Geodesic).unwrap(), 0.0);
        assert_eq!(
            od(&eye, &euler([0.0, 0.0, FRAC_PI_2]), OdReading::Geodesic).unwrap(),
            90.0
        );
        assert_eq!(
            od(&eye, &euler([0.0, 0.0, FRAC_PI_2]), OdReading::Literal).unwrap(),
            45.0
        );
        for axis in [[PI, 0.0, 0.0], [0.0, PI, 0.0], [0.0, 0.0, PI]] {
            assert!((od(&eye, &euler(axis), OdReading::Geodesic).unwrap() - 180.0).abs() < 1e-6);
        }
        let planar = od(
            &Tensor::identity(2),
            &rotation_from_euler(&[0.5f64]),
            OdReading::Geodesic,
        )
        .unwrap();
        assert!((planar - 0.5f64.to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn od_rejects_non_rotations() {
        let eye = Tensor::<f64>::identity(3);
        let mut skew = eye.clone();
        skew.set(0, 1, 0.1);
        assert!(od(&eye, &skew, OdReading::Geodesic).is_err());
        assert!(od(&eye, &Tensor::identity(2), OdReading::Geodesic).is_err());
    }

    #[test]
    fn td_reference_values() {
        assert_eq!(td(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(td(&[0.0, 0.0, 0.0], &[3.0, 4.0, 0.0]).unwrap(), 5.0);
        assert!(td(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn target_undoes_the_disturbance() {
        let spec = DisturbanceSpec {
            rotation_deg: [25.0, 35.0, 45.0],
            translation: vec![-2.0, 2.5, -4.0],
        };
        let target = InferenceTarget::new((0..15).collect(), 3, &spec, 10.0).unwrap();
        let start = td(&[0.0; 3], &target.translation).unwrap();
        assert!((start - 26.25f64.sqrt()).abs() < 1e-12);
        let a = spec.rotation::<f64>(3);
        let t = spec.translation_vec(3).unwrap();
        let pose = Pose::new(spec.angles_rad(3), vec![0.0; 3]).unwrap();
        let x = Tensor::new(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let disturbed = Tensor::from_fn(1, 3, |_, r| {
            (0..3).map(|k| a.get(r, k) * x.get(0, k)).sum::<f64>() + t[r]
        });
        let r = target.rotation_tensor::<f64>();
        for c in 0..3 {
            let back = (0..3).map(|k| r.get(c, k) * disturbed.get(0, k)).sum::<f64>() + target.translation[c];
            assert!((back - x.get(0, c)).abs() < 1e-12);
        }
        let d = discrepancy(
            &Tensor::identity(15),
            &pose,
            &target,
            FbeVariant::OffDiagonal,
            OdReading::Geodesic,
        )
        .unwrap();
        assert!((d.td_cm - 10.0 * start).abs() < 1e-9);
    }

    fn dense_od(a: [f64; 3], b: [f64; 3]) -> f64 {
        let ra = Rotation3::from_axis_angle(&Vector3::x_axis(), a[0])
            * Rotation3::from_axis_angle(&Vector3::y_axis(), a[1])
            * Rotation3::from_axis_angle(&Vector3::z_axis(), a[2]);
        let rb = Rotation3::from_axis_angle(&Vector3::x_axis(), b[0])
            * Rotation3::from_axis_angle(&Vector3::y_axis(), b[1])
            * Rotation3::from_axis_angle(&Vector3::z_axis(), b[2]);
        let m: Matrix3<f64> = ra.matrix().transpose() * rb.matrix();
        ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos() * 180.0 / PI
    }

    #[test]
    fn od_and_td_match_dense_formulas_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-PI..PI));
            let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(-PI..PI));
            let got = od(&euler(a), &euler(b), OdReading::Geodesic).unwrap();
            // acos is ill-conditioned near 0 and 180 degrees
            let want = dense_od(a, b);
            let tol = if want > 1.0 && want < 179.0 { 1e-9 } else { 1e-5 };
            assert!((got - want).abs() < tol, "{got} vs {want}");
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
            let q: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
            let dense = (Vector3::from(q) - Vector3::from(p)).norm();
            assert!((td(&p, &q).unwrap() - dense).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn od_is_a_bounded_symmetric_angle(
            a in prop::array::uniform3(-3.0f64..3.0),
            b in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let x = od(&euler(a), &euler(b), OdReading::Geodesic).unwrap();
            let y = od(&euler(b), &euler(a), OdReading::Geodesic).unwrap();
            prop_assert!((0.0..=180.0).contains(&x));
            prop_assert!((x - y).abs() < 1e-6);
            prop_assert!(od(&euler(a), &euler(a), OdReading::Geodesic).unwrap() < 1e-5);
        }
    }
}
