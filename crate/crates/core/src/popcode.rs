//! Gaussian-tuned population codes for position, direction and magnitude.
//!
//! A neuron with center `c` on a lattice with spacing `r`, tuning factor
//! `zeta` and dimension `D` responds to stimulus `s` with
//! `r^D * N(s; c, sigma I)`, `sigma = zeta r^2`. With normalization enabled the
//! response is divided by its peak, giving `exp(-|s - c|^2 / (2 sigma))` in
//! `[0, 1]`. Encoded frames are `N x K` matrices: one row per feature, one
//! column per neuron.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::perspective::SubmodalFrame;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeKind {
    Posture,
    Direction,
    Magnitude,
}

impl LatticeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Posture => "posture",
            Self::Direction => "direction",
            Self::Magnitude => "magnitude",
        }
    }
}

/// Stimulus range a lattice is laid out over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StimulusRange {
    /// Axis-aligned box; the grid is placed on the enclosing cube.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Unit circle (`dim = 2`) or unit sphere (`dim = 3`).
    Sphere { dim: usize },
    /// `[0, max]`
    Segment { max: f64 },
}

/// Serializable, explicit lattice description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub kind: LatticeKind,
    pub count: usize,
    pub dim: usize,
    pub zeta: f64,
    pub spacing: f64,
    /// Stimulus range covered, per dimension.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice<T> {
    spec: LatticeSpec,
    centers: Arc<Tensor<T>>,
}

impl<T: Scalar> Lattice<T> {
    pub fn from_spec(spec: LatticeSpec) -> Result<Self> {
        if spec.centers.len() != spec.count || spec.centers.iter().any(|c| c.len() != spec.dim) {
            return Err(Error::Dimension {
                expected: format!("{} centers of dimension {}", spec.count, spec.dim),
                got: format!("{} centers", spec.centers.len()),
            });
        }
        if !(spec.spacing > 0.0 && spec.zeta > 0.0 && spec.zeta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "{} lattice needs spacing > 0 and zeta in (0, 1], got {} and {}",
                spec.kind.name(),
                spec.spacing,
                spec.zeta
            )));
        }
        let data = spec.centers.iter().flatten().map(|&x| T::lit(x)).collect();
        let centers = Arc::new(Tensor::new(spec.count, spec.dim, data)?);
        Ok(Self { spec, centers })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn kind(&self) -> LatticeKind {
        self.spec.kind
    }

    pub fn count(&self) -> usize {
        self.spec.count
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing
    }

    pub fn zeta(&self) -> f64 {
        self.spec.zeta
    }

    pub fn sigma(&self) -> f64 {
        self.spec.zeta * self.spec.spacing * self.spec.spacing
    }

    /// `r^D (2 pi sigma)^(-D/2)`, the response at a center.
    pub fn peak(&self) -> f64 {
        let d = self.spec.dim as f64;
        self.spec.spacing.powf(d) * (std::f64::consts::TAU * self.sigma()).powf(-d / 2.0)
    }

    pub fn centers(&self) -> &Arc<Tensor<T>> {
        &self.centers
    }

    /// Response of every neuron; `normalized` divides by [`Self::peak`].
    pub fn encode(&self, stimulus: &[T], normalized: bool) -> Result<Vec<T>> {
        if stimulus.len() != self.spec.dim {
            return Err(Error::Dimension {
                expected: format!("{}-dimensional {} stimulus", self.spec.dim, self.spec.kind.name()),
                got: stimulus.len().to_string(),
            });
        }
        let scale = T::lit(if normalized { 1.0 } else { self.peak() });
        let inv = T::lit(1.0 / (2.0 * self.sigma()));
        Ok((0..self.spec.count)
            .map(|a| {
                let d2: T = self
                    .centers
                    .row_slice(a)
                    .iter()
                    .zip(stimulus)
                    .map(|(&c, &s)| (s - c) * (s - c))
                    .sum();
                scale * (-d2 * inv).exp()
            })
            .collect())
    }
}

/// Unit-sphere points: golden-angle spiral, then a fixed number of
/// inverse-square repulsion steps to even out the spacing.
pub fn fibonacci_sphere(count: usize) -> Vec<[f64; 3]> {
    let mut pts = golden_spiral(count);
    let step = 0.5 / count as f64;
    for _ in 0..300 {
        let forces: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                let mut f = [0.0; 3];
                for q in &pts {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if r2 > 0.0 {
                        let inv = 1.0 / (r2 * r2.sqrt());
                        (0..3).for_each(|a| f[a] += d[a] * inv);
                    }
                }
                f
            })
            .collect();
        for (p, f) in pts.iter_mut().zip(&forces) {
            let q = [p[0] + step * f[0], p[1] + step * f[1], p[2] + step * f[2]];
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            *p = [q[0] / n, q[1] / n, q[2] / n];
        }
    }
    pts
}

fn golden_spiral(count: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [rho * phi.cos(), rho * phi.sin(), z]
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_nearest_neighbor(points: &[Vec<f64>]) -> f64 {
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / points.len() as f64
}

fn integer_root(count: usize, dim: usize) -> Option<usize> {
    let k = (count as f64).powf(1.0 / dim as f64).round() as usize;
    (k >= 2 && k.pow(dim as u32) == count).then_some(k)
}

/// Lays out `count` neurons of `kind` over `range`.
pub fn build_lattice<T: Scalar>(
    kind: LatticeKind,
    count: usize,
    range: &StimulusRange,
    zeta: f64,
) -> Result<Lattice<T>> {
    let spec = match (kind, range) {
        (LatticeKind::Posture, StimulusRange::Box { lo, hi }) => {
            let dim = lo.len();
            if hi.len() != dim || !(2..=3).contains(&dim) {
                return Err(Error::InvalidParameter("posture range must be a 2D or 3D box".into()));
            }
            let k = integer_root(count, dim).ok_or_else(|| Error::LatticeLayout {
                kind: kind.name().into(),
                count,
                admissible: format!(
                    "k^{dim} for k >= 2 (e.g. {}, {}, {})",
                    2usize.pow(dim as u32),
                    3usize.pow(dim as u32),
                    4usize.pow(dim as u32)
                ),
            })?;
            let side = lo
                .iter()
                .zip(hi)
                .map(|(l, h)| h - l)
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE);
            let cube_lo: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h) - 0.5 * side).collect();
            let step = side / (k - 1) as f64;
            let centers = (0..count)
                .map(|idx| {
                    // first axis varies slowest
                    (0..dim)
                        .map(|a| {
                            let digit = idx / k.pow((dim - 1 - a) as u32) % k;
                            cube_lo[a] + step * digit as f64
                        })
                        .collect()
                })
                .collect();
            LatticeSpec {
                kind,
                count,
                dim,
                zeta,
                spacing: step,
                hi: cube_lo.iter().map(|l| l + side).collect(),
                lo: cube_lo,
                centers,
            }
        }
        (LatticeKind::Direction, StimulusRange::Sphere { dim }) => {
            let (centers, spacing): (Vec<Vec<f64>>, f64) = match dim {
                2 if count >= 3 => {
                    let c = (0..count)
                        .map(|j| {
                            let a = std::f64::consts::TAU * j as f64 / count as f64;
                            vec![a.cos(), a.sin()]
                        })
                        .collect();
                    (c, 2.0 * (std::f64::consts::PI / count as f64).sin())
                }
                3 if count >= 4 => {
                    let c: Vec<Vec<f64>> = fibonacci_sphere(count).iter().map(|p| p.to_vec()).collect();
                    let r = mean_nearest_neighbor(&c);
                    (c, r)
                }
                2 | 3 => {
                    return Err(Error::LatticeLayout {
                        kind: kind.name().into(),
                        count,
                        admissible: if *dim == 2 { ">= 3".into() } else { ">= 4".into() },
                    })
                }
                _ => return Err(Error::InvalidParameter(format!("direction lattice dimension {dim}"))),
            };
            LatticeSpec {
                kind,
                count,
                dim: *dim,
                zeta,
                spacing,
                lo: vec![-1.0; *dim],
                hi: vec![1.0; *dim],
                centers,
            }
        }
        (LatticeKind::Magnitude, StimulusRange::Segment { max }) => {
            if count < 2 {
                return Err(Error::LatticeLayout {
                    kind: kind.name().into(),
                    count,
                    admissible: ">= 2".into(),
                });
            }
            if !(*max > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "magnitude range max must be > 0, got {max}"
                )));
            }
            let step = max / (count - 1) as f64;
            LatticeSpec {
                kind,
                count,
                dim: 1,
                zeta,
                spacing: step,
                lo: vec![0.0],
                hi: vec![*max],
                centers: (0..count).map(|j| vec![step * j as f64]).collect(),
            }
        }
        _ => {
            return Err(Error::InvalidParameter(format!(
                "{} lattice cannot be laid out over {range:?}",
                kind.name()
            )))
        }
    };
    Lattice::from_spec(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coding {
    /// Gaussian population code, normalized to `[0, 1]`.
    Population,
    /// Sub-modal values rescaled per column into `[0, 1]`.
    Raw,
}

/// Lattice layout parameters for [`Encoder::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopcodeConfig {
    pub coding: Coding,
    pub posture_count: usize,
    pub direction_count: usize,
    pub magnitude_count: usize,
    /// Tuning factors for posture, direction, magnitude.
    pub zeta: [f64; 3],
    /// Fractional expansion of the training bounding box per axis.
    pub posture_margin: f64,
    /// Magnitude range is `[0, headroom * max training speed]`.
    pub magnitude_headroom: f64,
}

impl Default for PopcodeConfig {
    fn default() -> Self {
        Self {
            coding: Coding::Population,
            posture_count: 64,
            direction_count: 32,
            magnitude_count: 4,
            zeta: [0.85, 0.85, 0.95],
            posture_margin: 0.2,
            magnitude_headroom: 1.5,
        }
    }
}

impl PopcodeConfig {
    /// 16 / 8 / 4 neurons for planar scenes.
    pub fn planar() -> Self {
        Self {
            posture_count: 16,
            direction_count: 8,
            ..Self::default()
        }
    }
}

/// Per-column affine map `x * scale + shift` used by raw coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Serializable encoder description; its hash pins a trained model to its
/// population layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub coding: Coding,
    pub posture: LatticeSpec,
    pub direction: LatticeSpec,
    pub magnitude: LatticeSpec,
}

impl EncoderSpec {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("encoder spec serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoded sub-modalities of one frame, each `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame<T> {
    pub posture: Tensor<T>,
    pub direction: Tensor<T>,
    pub magnitude: Tensor<T>,
}

impl<T: Scalar> EncodedFrame<T> {
    pub fn get(&self, kind: LatticeKind) -> &Tensor<T> {
        match kind {
            LatticeKind::Posture => &self.posture,
            LatticeKind::Direction => &self.direction,
            LatticeKind::Magnitude => &self.magnitude,
        }
    }
}

/// The three lattices plus the coding mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    spec: EncoderSpec,
    posture: Lattice<T>,
    direction: Lattice<T>,
    magnitude: Lattice<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn from_spec(spec: EncoderSpec) -> Result<Self> {
        Ok(Self {
            posture: Lattice::from_spec(spec.posture.clone())?,
            direction: Lattice::from_spec(spec.direction.clone())?,
            magnitude: Lattice::from_spec(spec.magnitude.clone())?,
            spec,
        })
    }

    /// Derives lattice ranges from training data seen from the canonical
    /// perspective: bounding box of positions and the largest speed.
    pub fn fit(frames: &[Tensor<T>], config: &PopcodeConfig) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidParameter("cannot fit an encoder on no frames".into()))?;
        let dim = first.cols();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for f in frames {
            for i in 0..f.rows() {
                for a in 0..dim {
                    let v = f.get(i, a).to_f64_lossy();
                    lo[a] = lo[a].min(v);
                    hi[a] = hi[a].max(v);
                }
            }
        }
        for a in 0..dim {
            let pad = config.posture_margin * (hi[a] - lo[a]);
            lo[a] -= pad;
            hi[a] += pad;
        }
        let mut max_speed = 0.0f64;
        for w in frames.windows(2) {
            for i in 0..w[0].rows() {
                let s = (0..dim)
                    .map(|a| (w[1].get(i, a) - w[0].get(i, a)).to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt();
                max_speed = max_speed.max(s);
            }
        }
        let max_speed = if max_speed > 0.0 { max_speed } else { 1.0 };
        let posture = build_lattice::<T>(
            LatticeKind::Posture,
            config.posture_count,
            &StimulusRange::Box { lo, hi },
            config.zeta[0],
        )?;
        let direction = build_lattice::<T>(
            LatticeKind::Direction,
            config.direction_count,
            &StimulusRange::Sphere { dim },
            config.zeta[1],
        )?;
        let magnitude = build_lattice::<T>(
            LatticeKind::Magnitude,
            config.magnitude_count,
            &StimulusRange::Segment {
                max: config.magnitude_headroom * max_speed,
            },
            config.zeta[2],
        )?;
        Self::from_spec(EncoderSpec {
            coding: config.coding,
            posture: posture.spec,
            direction: direction.spec,
            magnitude: magnitude.spec,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn coding(&self) -> Coding {
        self.spec.coding
    }

    pub fn hash(&self) -> String {
        self.spec.hash()
    }

    pub fn lattice(&self, kind: LatticeKind) -> &Lattice<T> {
        match kind {
            LatticeKind::Posture => &self.posture,
            LatticeKind::Direction => &self.direction,
            LatticeKind::Magnitude => &self.magnitude,
        }
    }

    /// Columns per feature for `kind` under the active coding.
    pub fn width(&self, kind: LatticeKind) -> usize {
        match self.spec.coding {
            Coding::Population => self.lattice(kind).count(),
            Coding::Raw => self.lattice(kind).dim(),
        }
    }

    /// Raw-coding rescale into `[0, 1]`: positions by the posture cube,
    /// directions by `(d + 1) / 2`, magnitudes by the magnitude range.
    pub fn raw_affine(&self, kind: LatticeKind) -> Affine {
        let s = &self.lattice(kind).spec;
        let scale: Vec<f64> = s.lo.iter().zip(&s.hi).map(|(l, h)| 1.0 / (h - l)).collect();
        let shift = s.lo.iter().zip(&scale).map(|(l, k)| -l * k).collect();
        Affine { scale, shift }
    }

    pub fn encode_block(&self, kind: LatticeKind, stimuli: &Tensor<T>, present: Option<&[bool]>) -> Result<Tensor<T>> {
        let lattice = self.lattice(kind);
        if stimuli.cols() != lattice.dim() {
            return Err(Error::Dimension {
                expected: format!("{}-dimensional {} stimuli", lattice.dim(), kind.name()),
                got: stimuli.cols().to_string(),
            });
        }
        let n = stimuli.rows();
        match self.spec.coding {
            Coding::Population => {
                let k = lattice.count();
                let mut out = Tensor::zeros(n, k);
                for i in 0..n {
                    if present.is_some_and(|p| !p[i]) {
                        continue;
                    }
                    let act = lattice.encode(stimuli.row_slice(i), true)?;
                    out.data_mut()[i * k..(i + 1) * k].copy_from_slice(&act);
                }
                Ok(out)
            }
            Coding::Raw => {
                let aff = self.raw_affine(kind);
                Ok(Tensor::from_fn(n, stimuli.cols(), |i, c| {
                    stimuli.get(i, c) * T::lit(aff.scale[c]) + T::lit(aff.shift[c])
                }))
            }
        }
    }

    /// Encodes all features of a frame (feature-major rows, neuron-minor columns).
    pub fn encode_frame(&self, frame: &SubmodalFrame<T>) -> Result<EncodedFrame<T>> {
        Ok(EncodedFrame {
            posture: self.encode_block(LatticeKind::Posture, &frame.position, None)?,
            direction: self.encode_block(LatticeKind::Direction, &frame.direction, Some(&frame.direction_present))?,
            magnitude: self.encode_block(LatticeKind::Magnitude, &frame.magnitude, None)?,
        })
    }
}
