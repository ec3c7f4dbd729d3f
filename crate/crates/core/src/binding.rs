//! Logistic-gated assignment of observed features to body slots.
//!
//! `w = sigmoid(w_b)` is `N x M`: row `i` is an observed feature, column `j` a
//! slot. Slot `j` receives `sum_i w_ij a_i`; with encoded features stacked as
//! the rows of `A` (`N x K`) the bound block is `w^T A` (`M x K`), flattened
//! slot-major into the Gestalt vector.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::momentum::Momentum;
use crate::scalar::Scalar;

/// Bias for the fixed training assignment.
pub const TRAINING_BIAS: f64 = 1000.0;
/// Uniform bias every inference trial starts from.
pub const DEFAULT_INFERENCE_BIAS: f64 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindingMode {
    /// `+1000` on the diagonal, `-1000` elsewhere, frozen.
    Training,
    /// Uniform bias, adaptable.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingState<T> {
    bias: Tensor<T>,
    history: Momentum<T>,
    frozen: bool,
}

impl<T: Scalar> BindingState<T> {
    pub fn from_bias(bias: Tensor<T>, frozen: bool) -> Self {
        Self {
            bias,
            history: Momentum::default(),
            frozen,
        }
    }

    /// Observed features.
    pub fn n(&self) -> usize {
        self.bias.rows()
    }

    /// Slots.
    pub fn m(&self) -> usize {
        self.bias.cols()
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn history(&self) -> &Momentum<T> {
        &self.history
    }

    /// `sigmoid(w_b)` elementwise.
    pub fn weights(&self) -> Tensor<T> {
        self.bias.map(sigmoid)
    }
}

/// Training: diagonal assignment, frozen. Inference: every bias set to
/// `inference_bias`, adaptable.
pub fn init_binding<T: Scalar>(mode: BindingMode, n: usize, m: usize, inference_bias: f64) -> Result<BindingState<T>> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!("binding needs N, M > 0, got {n}x{m}")));
    }
    Ok(match mode {
        BindingMode::Training => BindingState::from_bias(
            Tensor::from_fn(n, m, |i, j| T::lit(if i == j { TRAINING_BIAS } else { -TRAINING_BIAS })),
            true,
        ),
        BindingMode::Inference => BindingState::from_bias(Tensor::filled(n, m, T::lit(inference_bias)), false),
    })
}

/// `w^T A`: slot `j` gets `sum_i w_ij A_i`.
pub fn bind<T: Scalar>(weights: &Tensor<T>, encoded: &Tensor<T>) -> Result<Tensor<T>> {
    if weights.rows() != encoded.rows() {
        return Err(Error::Dimension {
            expected: format!("{} encoded features", weights.rows()),
            got: encoded.rows().to_string(),
        });
    }
    weights.transpose().matmul(encoded)
}

/// One momentum step on the biases; frozen states are left untouched.
pub fn adapt_binding<T: Scalar>(state: &mut BindingState<T>, grad: &Tensor<T>, eta: f64, gamma: f64) -> Result<()> {
    if state.frozen {
        return Ok(());
    }
    if grad.shape() != state.bias.shape() {
        return Err(Error::Dimension {
            expected: format!("{:?} binding gradient", state.bias.shape()),
            got: format!("{:?}", grad.shape()),
        });
    }
    state.history.apply(
        "binding bias",
        state.bias.data_mut(),
        grad.data(),
        T::lit(eta),
        T::lit(gamma),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FbeVariant {
    /// Per slot, distance of its column to the target one-hot column.
    #[default]
    OffDiagonal,
    /// Per slot, the target entry's error plus the squared target entries of
    /// every other slot.
    Literal,
}

/// Identity assignment: observed feature `j` belongs to slot `j`.
pub fn diagonal_target(m: usize) -> Vec<usize> {
    (0..m).collect()
}

/// Target for a sequence reordered by `FeatureSequence::permute_features`:
/// slot `j` is now observed at the index `k` with `permutation[k] = j`.
pub fn target_for_permutation(permutation: &[usize]) -> Vec<usize> {
    crate::datagen::invert_permutation(permutation)
}

/// Feature binding error against `target`, where `target[j]` is the
/// observed feature that belongs to slot `j`.
pub fn fbe<T: Scalar>(weights: &Tensor<T>, target: &[usize], variant: FbeVariant) -> Result<f64> {
    let (n, m) = weights.shape();
    if target.len() != m || target.iter().any(|&i| i >= n) {
        return Err(Error::Dimension {
            expected: format!("{m} target rows in 0..{n}"),
            got: format!("{target:?}"),
        });
    }
    let w = |i: usize, j: usize| weights.get(i, j).to_f64_lossy();
    let mut total = 0.0;
    for (j, &tj) in target.iter().enumerate() {
        let mut acc = (w(tj, j) - 1.0).powi(2);
        match variant {
            FbeVariant::OffDiagonal => {
                acc += (0..n).filter(|&i| i != tj).map(|i| w(i, j).powi(2)).sum::<f64>();
            }
            FbeVariant::Literal => {
                acc += (0..m).filter(|&i| i != j).map(|i| w(target[i], i).powi(2)).sum::<f64>();
            }
        }
        total += acc.sqrt();
    }
    Ok(total)
}

/// Observed feature with the largest weight in each slot column.
pub fn column_argmax<T: Scalar>(weights: &Tensor<T>) -> Vec<usize> {
    (0..weights.cols())
        .map(|j| {
            (0..weights.rows())
                .fold((0, T::neg_infinity()), |best, i| {
                    let v = weights.get(i, j);
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Writes the matrix as CSV rows (one per observed feature).
pub fn write_matrix_csv<T: Scalar>(weights: &Tensor<T>, w: impl std::io::Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let header: Vec<String> = (0..weights.cols()).map(|j| format!("slot{j}")).collect();
    wr.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for i in 0..weights.rows() {
        let row: Vec<String> = weights
            .row_slice(i)
            .iter()
            .map(|v| v.to_f64_lossy().to_string())
            .collect();
        wr.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_fbe(w: &[Vec<f64>], target: &[usize]) -> f64 {
        let mut s = 0.0;
        for j in 0..w[0].len() {
            let mut inner = 0.0;
            for (i, row) in w.iter().enumerate() {
                let goal = if target[j] == i { 1.0 } else { 0.0 };
                inner += (row[j] - goal) * (row[j] - goal);
            }
            s += inner.sqrt();
        }
        s
    }

    #[test]
    fn logistic_weights() {
        let s = BindingState::from_bias(
            Tensor::<f64>::from_rows(&[vec![0.0, -5.0, 1000.0, -1000.0]]).unwrap(),
            false,
        );
        let w = s.weights();
        assert_eq!(w.get(0, 0), 0.5);
        assert!((w.get(0, 1) - 0.0067).abs() < 1e-4);
        assert_eq!(w.get(0, 2), 1.0);
        assert!(w.get(0, 3) < 1e-300);
    }

    #[test]
    fn init_modes() {
        let t = init_binding::<f64>(BindingMode::Training, 2, 2, DEFAULT_INFERENCE_BIAS).unwrap();
        assert!(t.is_frozen());
        assert_eq!(t.weights().data(), &[1.0, 0.0, 0.0, 1.0]);
        let i = init_binding::<f64>(BindingMode::Inference, 15, 15, DEFAULT_INFERENCE_BIAS).unwrap();
        assert!(i.weights().data().iter().all(|&w| (w - 0.0067).abs() < 1e-4));
        let w0 = 1.0 / (1.0 + 5f64.exp());
        let oracle = 15.0 * ((w0 - 1.0).powi(2) + 14.0 * w0 * w0).sqrt();
        assert!((fbe(&i.weights(), &diagonal_target(15), FbeVariant::OffDiagonal).unwrap() - oracle).abs() < 1e-12);
        let dense = dense_fbe(&vec![vec![w0; 15]; 15], &diagonal_target(15));
        assert!((dense - oracle).abs() < 1e-12);
        assert!(init_binding::<f64>(BindingMode::Inference, 0, 3, -5.0).is_err());
    }

    #[test]
    fn fbe_simple_cases() {
        let eye = Tensor::<f64>::identity(4);
        assert_eq!(fbe(&eye, &diagonal_target(4), FbeVariant::OffDiagonal).unwrap(), 0.0);
        // the literal reading penalizes the other slots' correct entries
        assert_eq!(
            fbe(&eye, &diagonal_target(4), FbeVariant::Literal).unwrap(),
            4.0 * 3f64.sqrt()
        );
        let half = Tensor::scalar(0.5);
        assert_eq!(fbe(&half, &[0], FbeVariant::OffDiagonal).unwrap(), 0.5);
        // off-diagonal mass only moves the corrected reading
        let mut w = Tensor::<f64>::identity(2);
        w.set(1, 0, 0.5);
        assert_eq!(fbe(&w, &[0, 1], FbeVariant::OffDiagonal).unwrap(), 0.5);
        assert_eq!(fbe(&w, &[0, 1], FbeVariant::Literal).unwrap(), 2.0);
    }

    #[test]
    fn bind_cases() {
        let a = Tensor::from_fn(3, 4, |i, k| (i * 4 + k) as f64);
        let eye = init_binding::<f64>(BindingMode::Training, 3, 3, 0.0).unwrap().weights();
        assert_eq!(bind(&eye, &a).unwrap(), a);
        let uniform = Tensor::filled(3, 2, 0.25);
        let g = bind(&uniform, &a).unwrap();
        for j in 0..2 {
            for k in 0..4 {
                assert_eq!(g.get(j, k), 0.25 * (0..3).map(|i| a.get(i, k)).sum::<f64>());
            }
        }
        assert!(bind(&uniform, &Tensor::zeros(2, 4)).is_err());
    }

    #[test]
    fn adapt_rules() {
        let mut s = init_binding::<f64>(BindingMode::Inference, 2, 2, -5.0).unwrap();
        adapt_binding(&mut s, &Tensor::filled(2, 2, 1.0), 0.5, 0.0).unwrap();
        assert!(s.bias().data().iter().all(|&b| b == -5.5));
        adapt_binding(&mut s, &Tensor::filled(2, 2, 1.0), 0.5, 0.9).unwrap();
        let before = s.bias().clone();
        adapt_binding(&mut s, &Tensor::zeros(2, 2), 0.5, 0.9).unwrap();
        for (a, b) in s.bias().data().iter().zip(before.data()) {
            assert_eq!(*a, b + 0.9 * -0.5);
        }
        let snapshot = s.clone();
        assert!(adapt_binding(&mut s, &Tensor::filled(2, 2, f64::NAN), 0.5, 0.9).is_err());
        assert_eq!(s, snapshot);

        let mut frozen = init_binding::<f64>(BindingMode::Training, 2, 2, -5.0).unwrap();
        let f0 = frozen.clone();
        adapt_binding(&mut frozen, &Tensor::filled(2, 2, 3.0), 1.0, 0.9).unwrap();
        assert_eq!(frozen, f0);
    }

    #[test]
    fn permutation_target() {
        // observed k = old perm[k]; slot j was old feature j
        let perm = [2, 0, 1];
        let target = target_for_permutation(&perm);
        for (j, &k) in target.iter().enumerate() {
            assert_eq!(perm[k], j);
        }
        let w = Tensor::from_fn(3, 3, |i, j| if target[j] == i { 1.0 } else { 0.0 });
        assert_eq!(fbe(&w, &target, FbeVariant::OffDiagonal).unwrap(), 0.0);
        assert_eq!(column_argmax(&w), target);
    }

    #[test]
    fn fbe_matches_dense_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..1000 {
            let n = rng.random_range(1..8);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let mut target: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                target.swap(i, rng.random_range(0..=i));
            }
            let w = Tensor::from_rows(&rows).unwrap();
            let got = fbe(&w, &target, FbeVariant::OffDiagonal).unwrap();
            assert!((got - dense_fbe(&rows, &target)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn bind_is_linear(
            w in prop::collection::vec(0.0..1.0f64, 6),
            x in prop::collection::vec(-1.0..1.0f64, 8),
            y in prop::collection::vec(-1.0..1.0f64, 8),
            a in -2.0..2.0f64,
            b in -2.0..2.0f64,
        ) {
            let w = Tensor::new(2, 3, w).unwrap();
            let x = Tensor::new(2, 4, x).unwrap();
            let y = Tensor::new(2, 4, y).unwrap();
            let mix = Tensor::from_fn(2, 4, |i, k| a * x.get(i, k) + b * y.get(i, k));
            let lhs = bind(&w, &mix).unwrap();
            let bx = bind(&w, &x).unwrap();
            let by = bind(&w, &y).unwrap();
            for j in 0..3 {
                for k in 0..4 {
                    prop_assert!((lhs.get(j, k) - (a * bx.get(j, k) + b * by.get(j, k))).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn fbe_nonnegative_zero_only_at_target(w in prop::collection::vec(0.0..1.0f64, 9)) {
            let w = Tensor::new(3, 3, w).unwrap();
            let v = fbe(&w, &diagonal_target(3), FbeVariant::OffDiagonal).unwrap();
            prop_assert!(v >= 0.0);
            if w != Tensor::identity(3) {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn fbe_is_permutation_equivariant(w in prop::collection::vec(0.0..1.0f64, 16), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let w = Tensor::new(4, 4, w).unwrap();
            // relabel observed rows: new row k is old row perm[k]
            let wp = Tensor::from_fn(4, 4, |k, j| w.get(perm[k], j));
            let base = fbe(&w, &diagonal_target(4), FbeVariant::OffDiagonal).unwrap();
            let moved = fbe(&wp, &target_for_permutation(&perm), FbeVariant::OffDiagonal).unwrap();
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }
}
