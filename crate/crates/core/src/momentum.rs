//! Gradient descent with momentum on the difference of the two previous
//! parameter values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Momentum history of one parameter group: the last two post-update values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Momentum<T> {
    prev: Option<Vec<T>>,
    prev2: Option<Vec<T>>,
}

impl<T: Scalar> Default for Momentum<T> {
    fn default() -> Self {
        Self {
            prev: None,
            prev2: None,
        }
    }
}

impl<T: Scalar> Momentum<T> {
    /// Number of stored past values (0, 1 or 2).
    pub fn depth(&self) -> usize {
        usize::from(self.prev.is_some()) + usize::from(self.prev2.is_some())
    }

    /// `theta(t-1) - theta(t-2)`, zero until two updates have happened.
    pub fn delta(&self, i: usize) -> T {
        match (&self.prev, &self.prev2) {
            (Some(a), Some(b)) => a[i] - b[i],
            _ => T::zero(),
        }
    }

    /// In-place `theta += -lr * g + gamma * delta`, then rolls the history.
    /// Rejects non-finite gradients before touching `theta`.
    pub fn apply(&mut self, what: &str, theta: &mut [T], grad: &[T], lr: T, gamma: T) -> Result<()> {
        if grad.len() != theta.len() {
            return Err(Error::Dimension {
                expected: format!("{} gradient entries for {what}", theta.len()),
                got: grad.len().to_string(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{what}[{i}]")));
        }
        for (i, (t, &g)) in theta.iter_mut().zip(grad).enumerate() {
            *t += -lr * g + gamma * self.delta(i);
        }
        self.prev2 = self.prev.take();
        self.prev = Some(theta.to_vec());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_then_momentum() {
        let mut m = Momentum::<f64>::default();
        let mut theta = vec![1.0];
        m.apply("x", &mut theta, &[1.0], 0.5, 0.9).unwrap();
        assert_eq!(theta, vec![0.5]);
        assert_eq!(m.depth(), 1);
        m.apply("x", &mut theta, &[1.0], 0.5, 0.9).unwrap();
        assert_eq!(theta, vec![0.0]);
        assert_eq!(m.delta(0), -0.5);
        m.apply("x", &mut theta, &[0.0], 0.5, 0.9).unwrap();
        assert_eq!(theta, vec![-0.45]);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut m = Momentum::<f64>::default();
        let mut theta = vec![1.0, 2.0];
        assert!(m.apply("x", &mut theta, &[1.0], 0.1, 0.0).is_err());
        assert!(m.apply("x", &mut theta, &[1.0, f64::INFINITY], 0.1, 0.0).is_err());
        assert_eq!(theta, vec![1.0, 2.0]);
        assert_eq!(m.depth(), 0);
    }
}
