use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::FeatureSequence;

pub const WALKER_JOINTS: [&str; 15] = [
    "pelvis",
    "chest",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

/// Kinematic in-place walker facing `+x`, `y` to the left, `z` up, pelvis at
/// the origin. Lengths are in meters, angles in radians; the output is scaled
/// by `units_per_meter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkerParams {
    /// Frames per gait cycle.
    pub period: usize,
    pub frames: usize,
    pub dt: f64,
    pub units_per_meter: f64,
    pub hip_half_width: f64,
    pub thigh: f64,
    pub shank: f64,
    pub torso: f64,
    pub neck: f64,
    pub shoulder_half_width: f64,
    pub shoulder_drop: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub hip_amplitude: f64,
    pub knee_amplitude: f64,
    pub knee_phase: f64,
    pub shoulder_amplitude: f64,
    pub elbow_amplitude: f64,
    pub elbow_phase: f64,
    pub elbow_bend: f64,
    pub bob_amplitude: f64,
    pub sway_amplitude: f64,
    pub yaw_amplitude: f64,
    pub lean: f64,
    /// Gait phase at frame 0.
    pub phase: f64,
}

impl Default for WalkerParams {
    fn default() -> Self {
        Self {
            period: 148,
            frames: 1036,
            dt: 1.0 / 120.0,
            units_per_meter: 10.0,
            hip_half_width: 0.1,
            thigh: 0.45,
            shank: 0.43,
            torso: 0.45,
            neck: 0.27,
            shoulder_half_width: 0.19,
            shoulder_drop: 0.03,
            upper_arm: 0.3,
            forearm: 0.27,
            hip_amplitude: 0.42,
            knee_amplitude: 1.05,
            knee_phase: 0.9,
            shoulder_amplitude: 0.35,
            elbow_amplitude: 0.3,
            elbow_phase: 0.4,
            elbow_bend: 0.25,
            bob_amplitude: 0.025,
            sway_amplitude: 0.025,
            yaw_amplitude: 0.1,
            lean: 0.06,
            phase: 0.0,
        }
    }
}

impl WalkerParams {
    /// Default gait with body lengths jittered by up to 5% and amplitudes by
    /// up to 10%, deterministic in `subject`.
    pub fn subject(subject: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(subject);
        let mut p = Self::default();
        for len in [
            &mut p.hip_half_width,
            &mut p.thigh,
            &mut p.shank,
            &mut p.torso,
            &mut p.neck,
            &mut p.shoulder_half_width,
            &mut p.upper_arm,
            &mut p.forearm,
        ] {
            *len *= rng.random_range(0.95..1.05);
        }
        for amp in [
            &mut p.hip_amplitude,
            &mut p.knee_amplitude,
            &mut p.shoulder_amplitude,
            &mut p.elbow_amplitude,
            &mut p.bob_amplitude,
            &mut p.sway_amplitude,
            &mut p.yaw_amplitude,
        ] {
            *amp *= rng.random_range(0.9..1.1);
        }
        p.phase = rng.random_range(0.0..TAU);
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 || self.frames < 2 {
            return Err(Error::InvalidParameter(
                "walker needs period >= 2 and frames >= 2".into(),
            ));
        }
        let lengths = [
            self.thigh,
            self.shank,
            self.torso,
            self.neck,
            self.upper_arm,
            self.forearm,
            self.units_per_meter,
            self.dt,
        ];
        if lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(
                "walker lengths, scale and dt must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Joint positions (meters) at gait phase `phi`.
    pub fn pose_at(&self, phi: f64) -> [[f64; 3]; 15] {
        let pelvis = [
            0.0,
            self.sway_amplitude * phi.sin(),
            self.bob_amplitude * (2.0 * phi).cos(),
        ];
        let yaw = self.yaw_amplitude * phi.sin();
        let chest = add(
            pelvis,
            [self.torso * self.lean.sin(), 0.0, self.torso * self.lean.cos()],
        );
        let head = add(chest, [self.neck * self.lean.sin(), 0.0, self.neck * self.lean.cos()]);

        let mut joints = [[0.0; 3]; 15];
        joints[0] = pelvis;
        joints[1] = chest;
        joints[2] = head;
        for (side, sign, base) in [(0.0, 1.0, 3usize), (PI, -1.0, 6usize)] {
            let p = phi + side;
            let shoulder = add(
                chest,
                yawed([0.0, sign * self.shoulder_half_width, -self.shoulder_drop], -yaw),
            );
            let upper = -self.shoulder_amplitude * p.sin();
            let elbow = add(shoulder, sagittal(self.upper_arm, upper));
            let flex = self.elbow_bend + self.elbow_amplitude * 0.5 * (1.0 - (p + self.elbow_phase).cos());
            let wrist = add(elbow, sagittal(self.forearm, upper + flex));
            joints[base] = shoulder;
            joints[base + 1] = elbow;
            joints[base + 2] = wrist;
        }
        for (side, sign, base) in [(0.0, 1.0, 9usize), (PI, -1.0, 12usize)] {
            let p = phi + side;
            let hip = add(pelvis, yawed([0.0, sign * self.hip_half_width, 0.0], yaw));
            let thigh = self.hip_amplitude * p.sin();
            let knee = add(hip, sagittal(self.thigh, thigh));
            let flex = self.knee_amplitude * 0.5 * (1.0 + (p + self.knee_phase).sin());
            let ankle = add(knee, sagittal(self.shank, thigh - flex));
            joints[base] = hip;
            joints[base + 1] = knee;
            joints[base + 2] = ankle;
        }
        joints
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Hanging segment of `len` swung forward by `angle` in the x-z plane.
fn sagittal(len: f64, angle: f64) -> [f64; 3] {
    [len * angle.sin(), 0.0, -len * angle.cos()]
}

fn yawed(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Synthetic 15-joint walking sequence (`D = 3`).
pub fn generate_walker(params: &WalkerParams) -> Result<FeatureSequence<f64>> {
    params.validate()?;
    let k = params.units_per_meter;
    let frames = (0..params.frames)
        .map(|t| {
            let phi = params.phase + TAU * (t % params.period) as f64 / params.period as f64;
            let joints = params.pose_at(phi);
            Tensor::new(15, 3, joints.iter().flatten().map(|&x| x * k).collect()).unwrap()
        })
        .collect();
    Ok(
        FeatureSequence::new(frames, params.dt, WALKER_JOINTS.iter().map(|s| s.to_string()).collect())?
            .with_units_per_meter(k),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn cyclic_with_period() {
        let p = WalkerParams {
            period: 50,
            frames: 100,
            ..WalkerParams::subject(3)
        };
        let seq = generate_walker(&p).unwrap();
        assert_eq!(seq.n_features(), 15);
        for t in 0..50 {
            assert!(max_diff(seq.frame(t), seq.frame(t + 50)) < 1e-9);
        }
    }

    #[test]
    fn zero_amplitudes_stand_still() {
        let p = WalkerParams {
            hip_amplitude: 0.0,
            knee_amplitude: 0.0,
            shoulder_amplitude: 0.0,
            elbow_amplitude: 0.0,
            bob_amplitude: 0.0,
            sway_amplitude: 0.0,
            yaw_amplitude: 0.0,
            ..Default::default()
        };
        let seq = generate_walker(&p).unwrap();
        for f in seq.frames() {
            assert_eq!(f, seq.frame(0));
        }
    }

    #[test]
    fn legs_mirror_with_half_period_shift() {
        let p = WalkerParams::default();
        let seq = generate_walker(&p).unwrap();
        let half = p.period / 2;
        for t in 0..p.period {
            let right = seq.frame(t);
            let left = seq.frame(t + half);
            for (l, r) in [(9, 12), (10, 13), (11, 14), (3, 6), (5, 8)] {
                assert!((right.get(r, 0) - left.get(l, 0)).abs() < 1e-9);
                assert!((right.get(r, 1) + left.get(l, 1)).abs() < 1e-9);
                assert!((right.get(r, 2) - left.get(l, 2)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn segment_lengths_hold() {
        let p = WalkerParams::subject(35);
        let seq = generate_walker(&p).unwrap();
        let dist = |f: &Tensor<f64>, a: usize, b: usize| {
            (0..3).map(|c| (f.get(a, c) - f.get(b, c)).powi(2)).sum::<f64>().sqrt()
        };
        for f in seq.frames().iter().step_by(7) {
            assert!((dist(f, 9, 10) - p.thigh * 10.0).abs() < 1e-9);
            assert!((dist(f, 13, 14) - p.shank * 10.0).abs() < 1e-9);
            assert!((dist(f, 4, 5) - p.forearm * 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn subjects_are_deterministic_and_distinct() {
        assert_eq!(WalkerParams::subject(5), WalkerParams::subject(5));
        assert_ne!(WalkerParams::subject(5), WalkerParams::subject(6));
    }
}
