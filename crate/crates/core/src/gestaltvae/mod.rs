//! Sub-modal variational autoencoders and the combined reconstruction loss.

mod vae;

pub use vae::{reconstruction_loss, train_vae, vae_forward, vae_graph, EpochLoss, VaeConfig, VaeGraph, VaeParams};

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binding::bind;
use crate::datagen::FeatureSequence;
use crate::diffcore::{Snapshot, Tensor};
use crate::error::{Error, Result};
use crate::perspective::{extract_submodal, Pose};
use crate::popcode::{hex, Encoder, EncoderSpec, LatticeKind, PopcodeConfig};
use crate::scalar::Scalar;

/// Order of everything indexed by sub-modality.
pub const SUBMODALITIES: [LatticeKind; 3] = [LatticeKind::Posture, LatticeKind::Direction, LatticeKind::Magnitude];

/// Reconstruction loss between a Gestalt vector `x` and its reconstruction `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconLoss {
    /// `sum (y - x)^2`
    #[default]
    SquaredError,
    /// `sum -x ln y - (1 - x) ln (1 - y)`
    Bce,
}

impl ReconLoss {
    pub fn eval<T: Scalar>(self, x: &Tensor<T>, y: &Tensor<T>) -> f64 {
        let mut s = 0.0;
        for (&a, &b) in x.data().iter().zip(y.data()) {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            s += match self {
                Self::SquaredError => (b - a) * (b - a),
                Self::Bce => {
                    let b = b.clamp(1e-12, 1.0 - 1e-12);
                    -a * b.ln() - (1.0 - a) * (1.0 - b).ln()
                }
            };
        }
        s
    }
}

/// `beta_p L_p + beta_d L_d + beta_m L_m`
pub fn combine(betas: &[f64; 3], parts: &[f64; 3]) -> f64 {
    betas.iter().zip(parts).map(|(b, l)| b * l).sum()
}

/// Training settings shared by the three autoencoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub popcode: PopcodeConfig,
    pub hidden: usize,
    pub latent: usize,
    /// Learning rates for posture, direction, magnitude.
    pub lr: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kl_weight: f64,
    pub kl_warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            popcode: PopcodeConfig::default(),
            hidden: 45,
            latent: 25,
            lr: [1e-3; 3],
            epochs: 40,
            batch_size: 32,
            seed: 0,
            kl_weight: 0.1,
            kl_warmup: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn vae_config(&self, kind: usize, input: usize) -> VaeConfig {
        VaeConfig {
            input,
            hidden: self.hidden,
            latent: self.latent,
            lr: self.lr[kind],
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_mul(3).wrapping_add(kind as u64),
            kl_weight: self.kl_weight,
            kl_warmup: self.kl_warmup,
        }
    }
}

/// Training provenance stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub data_hash: String,
    pub seed: u64,
    pub epochs: usize,
    /// One entry per epoch, sub-modalities in [`SUBMODALITIES`] order.
    pub curve: Vec<[EpochLoss; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    encoder: EncoderSpec,
    lattice_hash: String,
    configs: Vec<VaeConfig>,
    slots: usize,
    dim: usize,
    training: TrainingMeta,
}

const MODEL_FORMAT: &str = "gestalt-model/1";

/// Three trained autoencoders with the encoder they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct GestaltModel<T> {
    pub encoder: Encoder<T>,
    pub vaes: [VaeParams<T>; 3],
    pub configs: [VaeConfig; 3],
    pub slots: usize,
    pub dim: usize,
    pub training: TrainingMeta,
}

/// SHA-256 over the little-endian frame data.
pub fn sequence_hash<T: Scalar>(seq: &FeatureSequence<T>) -> String {
    let mut h = Sha256::new();
    for f in seq.frames() {
        for v in f.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Encoded, bound sub-modalities of one frame, each flattened slot-major into
/// a `1 x (M K)` Gestalt vector.
pub fn gestalt_frame<T: Scalar>(
    encoder: &Encoder<T>,
    weights: &Tensor<T>,
    x: &Tensor<T>,
    v: &Tensor<T>,
    pose: &Pose<T>,
) -> Result<[Tensor<T>; 3]> {
    let sub = extract_submodal(x, v, pose)?;
    let enc = encoder.encode_frame(&sub)?;
    let flat = |kind| -> Result<Tensor<T>> {
        let g = bind(weights, enc.get(kind))?;
        let len = g.len();
        g.reshaped(1, len)
    };
    Ok([
        flat(LatticeKind::Posture)?,
        flat(LatticeKind::Direction)?,
        flat(LatticeKind::Magnitude)?,
    ])
}

/// Training Gestalt vectors for frames `1..T` under the canonical perspective
/// and the identity assignment; one `(T-1) x (M K)` matrix per sub-modality.
pub fn training_set<T: Scalar>(encoder: &Encoder<T>, seq: &FeatureSequence<T>) -> Result<[Tensor<T>; 3]> {
    let n = seq.n_features();
    let eye = Tensor::identity(n);
    let pose = Pose::identity(seq.dim())?;
    let vel = seq.velocities();
    let mut rows: [Vec<T>; 3] = Default::default();
    let mut widths = [0; 3];
    for t in 1..seq.len() {
        let g = gestalt_frame(encoder, &eye, seq.frame(t), vel[t].as_ref().unwrap(), &pose)?;
        for k in 0..3 {
            widths[k] = g[k].len();
            rows[k].extend_from_slice(g[k].data());
        }
    }
    let [a, b, c] = rows;
    let t = seq.len() - 1;
    Ok([
        Tensor::new(t, widths[0], a)?,
        Tensor::new(t, widths[1], b)?,
        Tensor::new(t, widths[2], c)?,
    ])
}

impl<T: Scalar> GestaltModel<T> {
    /// Fits the encoder on `seq` and trains one autoencoder per sub-modality.
    pub fn train(config: &TrainConfig, seq: &FeatureSequence<T>) -> Result<Self> {
        let encoder = Encoder::fit(seq.frames(), &config.popcode)?;
        Self::train_with_encoder(config, encoder, seq)
    }

    pub fn train_with_encoder(config: &TrainConfig, encoder: Encoder<T>, seq: &FeatureSequence<T>) -> Result<Self> {
        let data = training_set(&encoder, seq)?;
        let configs: [VaeConfig; 3] = std::array::from_fn(|k| config.vae_config(k, data[k].cols()));
        let mut curves = Vec::with_capacity(3);
        let mut vaes = Vec::with_capacity(3);
        for k in 0..3 {
            configs[k].validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(configs[k].seed);
            let mut p = VaeParams::init(&configs[k], &mut rng);
            curves.push(train_vae(&mut p, &configs[k], &data[k], SUBMODALITIES[k].name())?);
            vaes.push(p);
        }
        let curve = (0..config.epochs)
            .map(|e| [curves[0][e], curves[1][e], curves[2][e]])
            .collect();
        Ok(Self {
            encoder,
            vaes: vaes
                .try_into()
                .map_err(|_| Error::InvalidParameter("vae count".into()))?,
            configs,
            slots: seq.n_features(),
            dim: seq.dim(),
            training: TrainingMeta {
                data_hash: sequence_hash(seq),
                seed: config.seed,
                epochs: config.epochs,
                curve,
            },
        })
    }

    /// Reconstructions of the three Gestalt vectors (posterior mean).
    pub fn reconstruct(&self, g: &[Tensor<T>; 3]) -> Result<[Tensor<T>; 3]> {
        let r0 = vae_forward(&self.vaes[0], &g[0])?.0;
        let r1 = vae_forward(&self.vaes[1], &g[1])?.0;
        let r2 = vae_forward(&self.vaes[2], &g[2])?.0;
        Ok([r0, r1, r2])
    }

    /// `[L_p, L_d, L_m, L]`
    pub fn losses(&self, g: &[Tensor<T>; 3], loss: ReconLoss, betas: &[f64; 3]) -> Result<[f64; 4]> {
        let r = self.reconstruct(g)?;
        let parts = [
            loss.eval(&g[0], &r[0]),
            loss.eval(&g[1], &r[1]),
            loss.eval(&g[2], &r[2]),
        ];
        Ok([parts[0], parts[1], parts[2], combine(betas, &parts)])
    }

    /// Errors unless `spec` is the layout this model was trained with.
    pub fn check_encoder(&self, spec: &EncoderSpec) -> Result<()> {
        if spec.hash() != self.encoder.hash() {
            return Err(Error::LatticeHashMismatch(format!(
                "{} (model) vs {} (given)",
                self.encoder.hash(),
                spec.hash()
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let manifest = Manifest {
            format: MODEL_FORMAT.into(),
            encoder: self.encoder.spec().clone(),
            lattice_hash: self.encoder.hash(),
            configs: self.configs.to_vec(),
            slots: self.slots,
            dim: self.dim,
            training: self.training.clone(),
        };
        let mut snap = Snapshot::new(serde_json::to_value(&manifest)?);
        for (k, p) in self.vaes.iter().enumerate() {
            p.push_to(SUBMODALITIES[k].name(), &mut snap);
        }
        snap.write_to(w)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let snap = Snapshot::read_from(r)?;
        let manifest: Manifest = serde_json::from_value(snap.meta.clone())?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::Snapshot(format!("unknown model format `{}`", manifest.format)));
        }
        if manifest.encoder.hash() != manifest.lattice_hash {
            return Err(Error::LatticeHashMismatch(format!(
                "stored {} vs recomputed {}",
                manifest.lattice_hash,
                manifest.encoder.hash()
            )));
        }
        let vaes = [
            VaeParams::from_snapshot(SUBMODALITIES[0].name(), &snap)?,
            VaeParams::from_snapshot(SUBMODALITIES[1].name(), &snap)?,
            VaeParams::from_snapshot(SUBMODALITIES[2].name(), &snap)?,
        ];
        let configs: [VaeConfig; 3] = manifest
            .configs
            .try_into()
            .map_err(|_| Error::Snapshot("expected three vae configs".into()))?;
        Ok(Self {
            encoder: Encoder::from_spec(manifest.encoder)?,
            vaes,
            configs,
            slots: manifest.slots,
            dim: manifest.dim,
            training: manifest.training,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// `epoch,L_p,L_d,L_m,KL_p,KL_d,KL_m`
    pub fn write_curve_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.into());
        wr.write_record(["epoch", "L_p", "L_d", "L_m", "KL_p", "KL_d", "KL_m"])
            .map_err(io)?;
        for (e, row) in self.training.curve.iter().enumerate() {
            let mut rec = vec![(e + 1).to_string()];
            rec.extend(row.iter().map(|l| l.recon.to_string()));
            rec.extend(row.iter().map(|l| l.kl.to_string()));
            wr.write_record(&rec).map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{simulate_pendulum, PendulumParams};
    use crate::popcode::Coding;

    fn short_pendulum() -> FeatureSequence<f64> {
        simulate_pendulum(&PendulumParams {
            frames: 200,
            splice: 10,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(epochs: usize, coding: Coding) -> TrainConfig {
        TrainConfig {
            popcode: PopcodeConfig {
                coding,
                ..PopcodeConfig::planar()
            },
            lr: [1e-2, 1e-2, 1e-3],
            epochs,
            hidden: 12,
            latent: 4,
            ..Default::default()
        }
    }

    #[test]
    fn loss_arithmetic() {
        let x = Tensor::<f64>::row(vec![0.2, 0.7]);
        assert_eq!(ReconLoss::SquaredError.eval(&x, &x), 0.0);
        assert_eq!(combine(&[8.0, 2.0, 0.125], &[1.0, 1.0, 1.0]), 10.125);
        assert_eq!(combine(&[8.0, 0.0, 0.0], &[0.5, 3.0, 7.0]), 4.0);
        let p = Tensor::<f64>::row(vec![0.5]);
        assert!((ReconLoss::Bce.eval(&Tensor::row(vec![1.0]), &p) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn training_set_shapes_follow_encoder() {
        let seq = short_pendulum();
        let enc = Encoder::fit(seq.frames(), &PopcodeConfig::planar()).unwrap();
        let data = training_set(&enc, &seq).unwrap();
        assert_eq!(data[0].shape(), (199, 32));
        assert_eq!(data[1].shape(), (199, 16));
        assert_eq!(data[2].shape(), (199, 8));
        assert!(data.iter().all(|d| d.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn zero_epochs_match_untrained_baseline() {
        let seq = short_pendulum();
        let model = GestaltModel::train(&quick(0, Coding::Population), &seq).unwrap();
        let cfg = &model.configs[0];
        let init = VaeParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(model.vaes[0], init);
        assert!(model.training.curve.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let seq = short_pendulum();
        let model = GestaltModel::train(&quick(2, Coding::Population), &seq).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = GestaltModel::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert!(back.check_encoder(model.encoder.spec()).is_ok());
        let mut other = model.encoder.spec().clone();
        other.posture.zeta = 0.5;
        assert!(matches!(back.check_encoder(&other), Err(Error::LatticeHashMismatch(_))));
    }

    #[test]
    fn raw_mode_uses_the_same_path() {
        let seq = short_pendulum();
        let model = GestaltModel::train(&quick(2, Coding::Raw), &seq).unwrap();
        assert_eq!(model.configs.clone().map(|c| c.input), [4, 4, 2]);
        let data = training_set(&model.encoder, &seq).unwrap();
        let row = |k: usize| Tensor::row(data[k].row_slice(5).to_vec());
        let l = model
            .losses(&[row(0), row(1), row(2)], ReconLoss::SquaredError, &[1.0, 1.0, 1.0])
            .unwrap();
        assert!(l.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
