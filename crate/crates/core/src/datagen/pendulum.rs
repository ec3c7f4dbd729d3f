use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::FeatureSequence;

/// Planar double pendulum. Angles are absolute, measured from the downward
/// vertical, counterclockwise positive; `y` points up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub gravity: f64,
    /// radians
    pub theta1: f64,
    pub omega1: f64,
    pub theta2: f64,
    pub omega2: f64,
    pub dt: f64,
    pub frames: usize,
    /// Frames crossfaded at the loop seam; 0 disables splicing.
    pub splice: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            l1: 0.8,
            l2: 0.6,
            m1: 1.25,
            m2: 1.0,
            gravity: 9.81,
            theta1: 60f64.to_radians(),
            omega1: 0.0,
            theta2: 0.0,
            omega2: 0.0,
            dt: 0.01,
            frames: 1000,
            splice: 20,
        }
    }
}

/// `[theta1, omega1, theta2, omega2]`
pub type PendulumState = [f64; 4];

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("m1", self.m1),
            ("m2", self.m2),
            ("dt", self.dt),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("pendulum {name} must be > 0, got {v}")));
        }
        if self.frames < 2 {
            return Err(Error::InvalidParameter("pendulum needs at least 2 frames".into()));
        }
        if self.splice >= self.frames {
            return Err(Error::InvalidParameter(format!(
                "splice length {} must be shorter than {} frames",
                self.splice, self.frames
            )));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> PendulumState {
        [self.theta1, self.omega1, self.theta2, self.omega2]
    }

    pub fn derivatives(&self, s: &PendulumState) -> PendulumState {
        let (l1, l2, m1, m2, g) = (self.l1, self.l2, self.m1, self.m2, self.gravity);
        let delta = s[2] - s[0];
        let (sd, cd) = delta.sin_cos();
        let den1 = (m1 + m2) * l1 - m2 * l1 * cd * cd;
        let den2 = (l2 / l1) * den1;
        let a1 = (m2 * l1 * s[1] * s[1] * sd * cd + m2 * g * s[2].sin() * cd + m2 * l2 * s[3] * s[3] * sd
            - (m1 + m2) * g * s[0].sin())
            / den1;
        let a2 = (-m2 * l2 * s[3] * s[3] * sd * cd + (m1 + m2) * g * s[0].sin() * cd
            - (m1 + m2) * l1 * s[1] * s[1] * sd
            - (m1 + m2) * g * s[2].sin())
            / den2;
        [s[1], a1, s[3], a2]
    }

    pub fn rk4_step(&self, s: &PendulumState) -> PendulumState {
        let h = self.dt;
        let add = |a: &PendulumState, k: &PendulumState, f: f64| [0, 1, 2, 3].map(|i| a[i] + f * k[i]);
        let k1 = self.derivatives(s);
        let k2 = self.derivatives(&add(s, &k1, h / 2.0));
        let k3 = self.derivatives(&add(s, &k2, h / 2.0));
        let k4 = self.derivatives(&add(s, &k3, h));
        [0, 1, 2, 3].map(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    /// `count` states starting with the initial condition.
    pub fn integrate(&self, count: usize) -> Vec<PendulumState> {
        let mut out = Vec::with_capacity(count);
        let mut s = self.initial_state();
        for _ in 0..count {
            out.push(s);
            s = self.rk4_step(&s);
        }
        out
    }

    /// Total mechanical energy (J).
    pub fn energy(&self, s: &PendulumState) -> f64 {
        let (l1, l2, m1, m2, g) = (self.l1, self.l2, self.m1, self.m2, self.gravity);
        let kinetic = 0.5 * m1 * l1 * l1 * s[1] * s[1]
            + 0.5
                * m2
                * (l1 * l1 * s[1] * s[1] + l2 * l2 * s[3] * s[3] + 2.0 * l1 * l2 * s[1] * s[3] * (s[0] - s[2]).cos());
        let potential = -(m1 + m2) * g * l1 * s[0].cos() - m2 * g * l2 * s[2].cos();
        kinetic + potential
    }

    /// Endpoint positions `[[x1, y1], [x2, y2]]`.
    pub fn positions(&self, s: &PendulumState) -> [[f64; 2]; 2] {
        let p1 = [self.l1 * s[0].sin(), -self.l1 * s[0].cos()];
        [p1, [p1[0] + self.l2 * s[2].sin(), p1[1] - self.l2 * s[2].cos()]]
    }

    /// Endpoint speeds (m/s).
    pub fn speeds(&self, s: &PendulumState) -> [f64; 2] {
        let v1 = [self.l1 * s[1] * s[0].cos(), self.l1 * s[1] * s[0].sin()];
        let v2 = [v1[0] + self.l2 * s[3] * s[2].cos(), v1[1] + self.l2 * s[3] * s[2].sin()];
        [v1[0].hypot(v1[1]), v2[0].hypot(v2[1])]
    }

    /// The `frames` states actually emitted: the trajectory integrated for
    /// `frames + splice` steps with its tail crossfaded over its head, so the
    /// last frame runs smoothly into the first.
    pub fn looped_states(&self) -> Vec<PendulumState> {
        let k = self.splice;
        let raw = self.integrate(self.frames + k);
        let mut out = raw[..self.frames].to_vec();
        for (i, state) in out.iter_mut().enumerate().take(k) {
            let w = i as f64 / k as f64;
            let tail = &raw[self.frames + i];
            for c in 0..4 {
                let diff = if c % 2 == 0 {
                    wrap_angle(state[c] - tail[c])
                } else {
                    state[c] - tail[c]
                };
                state[c] = tail[c] + w * diff;
            }
        }
        out
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    a - two_pi * ((a + std::f64::consts::PI) / two_pi).floor()
}

/// Joint endpoint trajectories (`N = 2`, `D = 2`, meters).
pub fn simulate_pendulum(params: &PendulumParams) -> Result<FeatureSequence<f64>> {
    params.validate()?;
    let frames = params
        .looped_states()
        .iter()
        .map(|s| {
            let p = params.positions(s);
            Tensor::new(2, 2, vec![p[0][0], p[0][1], p[1][0], p[1][1]]).unwrap()
        })
        .collect();
    FeatureSequence::new(frames, params.dt, vec!["elbow".into(), "tip".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unspliced() -> PendulumParams {
        PendulumParams {
            splice: 0,
            ..Default::default()
        }
    }

    #[test]
    fn hanging_equilibrium_stays_put() {
        let p = PendulumParams {
            theta1: 0.0,
            theta2: 0.0,
            ..Default::default()
        };
        let seq = simulate_pendulum(&p).unwrap();
        for f in seq.frames() {
            assert_eq!(f.data(), &[0.0, -0.8, 0.0, -1.4]);
        }
    }

    #[test]
    fn first_link_is_rigid() {
        let seq = simulate_pendulum(&PendulumParams::default()).unwrap();
        for f in seq.frames() {
            assert!((f.get(0, 0).hypot(f.get(0, 1)) - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn light_lower_link_gives_simple_pendulum_period() {
        let p = PendulumParams {
            m2: 1e-6,
            theta1: 0.05,
            theta2: 0.05,
            dt: 0.001,
            frames: 20_000,
            splice: 0,
            ..Default::default()
        };
        let states = p.integrate(p.frames);
        let crossings: Vec<f64> = states
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0][0] > 0.0 && w[1][0] <= 0.0)
            .map(|(i, w)| (i as f64 + w[0][0] / (w[0][0] - w[1][0])) * p.dt)
            .collect();
        let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
        let expected = std::f64::consts::TAU * (p.l1 / p.gravity).sqrt();
        assert!((period - expected).abs() / expected < 0.02, "{period} vs {expected}");
    }

    #[test]
    fn energy_drift_below_one_percent() {
        let p = unspliced();
        let states = p.integrate(p.frames);
        let e0 = p.energy(&states[0]);
        let scale = e0.abs().max(p.m1 * p.gravity * p.l1);
        for s in &states {
            assert!((p.energy(s) - e0).abs() < 0.01 * scale);
        }
    }

    #[test]
    fn finite_difference_speed_matches_angular_speed() {
        let p = PendulumParams {
            dt: 0.002,
            frames: 5000,
            ..unspliced()
        };
        let states = p.integrate(p.frames);
        let seq = simulate_pendulum(&p).unwrap();
        let vel = seq.velocities();
        let vmax = states.iter().map(|s| p.speeds(s)[1]).fold(0.0, f64::max);
        let mut checked = 0;
        for t in 1..p.frames {
            let v = vel[t].as_ref().unwrap();
            for j in 0..2 {
                let oracle = 0.5 * p.dt * (p.speeds(&states[t])[j] + p.speeds(&states[t - 1])[j]);
                if oracle < 0.1 * vmax * p.dt {
                    continue;
                }
                let fd = v.get(j, 0).hypot(v.get(j, 1));
                assert!((fd - oracle).abs() < 0.05 * oracle, "t={t} j={j}: {fd} vs {oracle}");
                checked += 1;
            }
        }
        assert!(checked > 5000);
    }

    #[test]
    fn default_swings_six_to_seven_times() {
        let p = PendulumParams::default();
        let states = p.looped_states();
        let crossings = states.windows(2).filter(|w| w[0][0] > 0.0 && w[1][0] <= 0.0).count();
        assert!((6..=7).contains(&crossings), "{crossings} cycles");
    }

    #[test]
    fn splice_closes_the_loop() {
        let p = PendulumParams::default();
        let seq = simulate_pendulum(&p).unwrap();
        let jump = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let typical = seq.frames().windows(2).map(|w| jump(&w[0], &w[1])).fold(0.0, f64::max);
        assert!(jump(seq.frame(p.frames - 1), seq.frame(0)) <= typical);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(PendulumParams {
            l1: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PendulumParams {
            dt: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
