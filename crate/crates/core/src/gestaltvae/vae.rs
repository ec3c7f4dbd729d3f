use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, Snapshot, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer sizes and optimizer settings of one sub-modal autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Final weight of the KL term.
    pub kl_weight: f64,
    /// Fraction of training over which the KL weight ramps up from 0.
    pub kl_warmup: f64,
}

impl VaeConfig {
    pub fn new(input: usize, hidden: usize, latent: usize, lr: f64) -> Self {
        Self {
            input,
            hidden,
            latent,
            lr,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            kl_weight: 1.0,
            kl_warmup: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.latent == 0 || self.hidden < self.latent {
            return Err(Error::InvalidParameter(format!(
                "vae needs input > 0 and hidden >= latent >= 1, got {}/{}/{}",
                self.input, self.hidden, self.latent
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidParameter(format!(
                "vae needs lr > 0 and batch size > 0, got {} and {}",
                self.lr, self.batch_size
            )));
        }
        Ok(())
    }
}

pub(crate) const PARAM_NAMES: [&str; 10] = [
    "enc_w", "enc_b", "mean_w", "mean_b", "logvar_w", "logvar_b", "dec_w", "dec_b", "out_w", "out_b",
];

/// Weights of a one-hidden-layer tanh encoder and decoder with a sigmoid
/// output. Matrices are `fan_in x fan_out`, biases `1 x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> VaeParams<T> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(config: &VaeConfig, rng: &mut impl Rng) -> Self {
        let (i, h, l) = (config.input, config.hidden, config.latent);
        let mut dense = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-bound..bound)));
            [w, Tensor::zeros(1, fan_out)]
        };
        let mut tensors = Vec::with_capacity(10);
        tensors.extend(dense(i, h));
        tensors.extend(dense(h, l));
        tensors.extend(dense(h, l));
        tensors.extend(dense(l, h));
        tensors.extend(dense(h, i));
        Self { tensors }
    }

    pub fn input(&self) -> usize {
        self.tensors[0].rows()
    }

    pub fn latent(&self) -> usize {
        self.tensors[2].cols()
    }

    pub fn push_to(&self, prefix: &str, snap: &mut Snapshot) {
        for (name, t) in PARAM_NAMES.iter().zip(&self.tensors) {
            snap.push(format!("{prefix}/{name}"), t);
        }
    }

    pub fn from_snapshot(prefix: &str, snap: &Snapshot) -> Result<Self> {
        let tensors = PARAM_NAMES
            .iter()
            .map(|n| snap.tensor(&format!("{prefix}/{n}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Nodes of one autoencoder pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct VaeGraph {
    pub mean: Var,
    pub logvar: Var,
    pub logits: Var,
    pub recon: Var,
}

/// Records encoder, latent and decoder for the rows of `x`. With `eps`
/// (`rows x latent` standard normal samples) the latent is `mean + exp(logvar/2) eps`,
/// otherwise the mean.
pub fn vae_graph<T: Scalar>(tape: &mut Tape<T>, params: &[Var], x: Var, eps: Option<Var>) -> Result<VaeGraph> {
    let h = tape.affine(x, params[0], params[1])?;
    let h = tape.tanh(h);
    let mean = tape.affine(h, params[2], params[3])?;
    let logvar = tape.affine(h, params[4], params[5])?;
    let z = match eps {
        Some(eps) => {
            let half = tape.scale(logvar, T::lit(0.5));
            let std = tape.exp(half);
            let noise = tape.mul(std, eps)?;
            tape.add(mean, noise)?
        }
        None => mean,
    };
    let d = tape.affine(z, params[6], params[7])?;
    let d = tape.tanh(d);
    let logits = tape.affine(d, params[8], params[9])?;
    let recon = tape.sigmoid(logits);
    Ok(VaeGraph {
        mean,
        logvar,
        logits,
        recon,
    })
}

/// Deterministic pass (posterior mean): `(reconstruction, mean, logvar)`.
pub fn vae_forward<T: Scalar>(params: &VaeParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.cols() != params.input() {
        return Err(Error::Dimension {
            expected: format!("{} input units", params.input()),
            got: x.cols().to_string(),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x.clone());
    let g = vae_graph(&mut tape, &vars, xv, None)?;
    Ok((
        tape.value(g.recon).clone(),
        tape.value(g.mean).clone(),
        tape.value(g.logvar).clone(),
    ))
}

/// Per-sample reconstruction loss `sum(BCE(x, recon) - H(x))` on a deterministic
/// pass, averaged over rows; zero at perfect reconstruction.
pub fn reconstruction_loss<T: Scalar>(params: &VaeParams<T>, data: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(data.clone());
    let g = vae_graph(&mut tape, &vars, xv, None)?;
    let l = tape.bce_logits(g.logits, xv)?;
    Ok(tape.value(l).item().to_f64_lossy() / data.rows() as f64)
}

/// Mean per-sample losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub recon: f64,
    pub kl: f64,
}

struct TrainGraph<T> {
    tape: Tape<T>,
    params: Vec<Var>,
    x: Var,
    eps: Var,
    recon: Var,
    kl: Var,
    kl_weight: Var,
    loss: Var,
}

impl<T: Scalar> TrainGraph<T> {
    fn build(params: &VaeParams<T>, rows: usize) -> Result<Self> {
        let mut tape = Tape::new();
        let pv: Vec<Var> = params.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let x = tape.constant(Tensor::zeros(rows, params.input()));
        let eps = tape.constant(Tensor::zeros(rows, params.latent()));
        let g = vae_graph(&mut tape, &pv, x, Some(eps))?;
        let recon = tape.bce_logits(g.logits, x)?;
        let kl = tape.kl_std_normal(g.mean, g.logvar)?;
        let kl_weight = tape.constant(Tensor::scalar(T::zero()));
        let weighted = tape.mul(kl, kl_weight)?;
        let total = tape.add(recon, weighted)?;
        let loss = tape.scale(total, T::one() / T::lit(rows as f64));
        Ok(Self {
            tape,
            params: pv,
            x,
            eps,
            recon,
            kl,
            kl_weight,
            loss,
        })
    }
}

/// Adam training on the rows of `data` (`samples x input`). Returns the
/// per-epoch curve. Bit-identical for equal `config`, data and initial params.
pub fn train_vae<T: Scalar>(
    params: &mut VaeParams<T>,
    config: &VaeConfig,
    data: &Tensor<T>,
    context: &str,
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    if data.cols() != params.input() || data.rows() == 0 {
        return Err(Error::Dimension {
            expected: format!("non-empty data with {} columns", params.input()),
            got: format!("{:?}", data.shape()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let refs: Vec<&Tensor<T>> = params.tensors.iter().collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &refs)?;
    let n = data.rows();
    let batch = config.batch_size.min(n);
    let batches = n.div_ceil(batch);
    let warmup_steps = (config.kl_warmup * (config.epochs * batches) as f64).ceil();
    let mut graphs: Vec<TrainGraph<T>> = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let width = data.cols();
    for epoch in 0..config.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for b in 0..batches {
            let idx = &order[b * batch..((b + 1) * batch).min(n)];
            let rows = idx.len();
            let g = match graphs.iter().position(|g| g.tape.value(g.x).rows() == rows) {
                Some(p) => &mut graphs[p],
                None => {
                    graphs.push(TrainGraph::build(params, rows)?);
                    graphs.last_mut().unwrap()
                }
            };
            for (p, t) in g.params.iter().zip(&params.tensors) {
                g.tape.set_value(*p, t)?;
            }
            let x = g.tape.leaf_mut(g.x);
            for (r, &i) in idx.iter().enumerate() {
                x.data_mut()[r * width..(r + 1) * width].copy_from_slice(data.row_slice(i));
            }
            let eps = g.tape.leaf_mut(g.eps);
            for e in eps.data_mut() {
                let s: f64 = StandardNormal.sample(&mut rng);
                *e = T::lit(s);
            }
            let w = if warmup_steps > 0.0 {
                (step as f64 / warmup_steps).min(1.0)
            } else {
                1.0
            };
            *g.tape.leaf_mut(g.kl_weight) = Tensor::scalar(T::lit(w * config.kl_weight));
            let loss = g.tape.forward(g.loss)?.item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("{context} epoch {epoch} batch {b}"),
                });
            }
            recon_sum += g.tape.value(g.recon).item().to_f64_lossy();
            kl_sum += g.tape.value(g.kl).item().to_f64_lossy();
            let grads = g.tape.backward(g.loss)?;
            let gr: Vec<&Tensor<T>> = g.params.iter().map(|&p| grads.expect(p)).collect();
            let mut pm: Vec<&mut Tensor<T>> = params.tensors.iter_mut().collect();
            adam.step(&mut pm, &gr)?;
            step += 1;
        }
        curve.push(EpochLoss {
            recon: recon_sum / n as f64,
            kl: kl_sum / n as f64,
        });
    }
    Ok(curve)
}
