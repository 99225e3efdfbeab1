//! Elementwise activations.

use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LEAKY_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    /// x if x >= 0 else alpha * x
    LeakyRelu { alpha: f64 },
    Relu,
    Identity,
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::LeakyRelu {
            alpha: DEFAULT_LEAKY_ALPHA,
        }
    }
}

impl ActivationKind {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            ActivationKind::LeakyRelu { alpha } => {
                if x >= F::zero() {
                    x
                } else {
                    F::from_f64(alpha) * x
                }
            }
            ActivationKind::Relu => {
                if x >= F::zero() {
                    x
                } else {
                    F::zero()
                }
            }
            ActivationKind::Identity => x,
        }
    }

    /// Slope at the stored forward input.
    pub fn slope<F: Scalar>(self, x: F) -> F {
        match self {
            ActivationKind::LeakyRelu { alpha } => {
                if x >= F::zero() {
                    F::one()
                } else {
                    F::from_f64(alpha)
                }
            }
            ActivationKind::Relu => {
                if x >= F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            ActivationKind::Identity => F::one(),
        }
    }

    pub fn forward<F: Scalar>(self, input: &Tensor<F>) -> Tensor<F> {
        input.map(|v| self.apply(v))
    }

    pub fn backward<F: Scalar>(self, input: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let mut g = grad_out.clone();
        for (gi, &xi) in g.data_mut().iter_mut().zip(input.data()) {
            *gi = *gi * self.slope(xi);
        }
        g
    }

    /// He-style initialization gain for this non-linearity.
    pub fn init_gain(self) -> f64 {
        match self {
            ActivationKind::LeakyRelu { alpha } => (2.0 / (1.0 + alpha * alpha)).sqrt(),
            ActivationKind::Relu => std::f64::consts::SQRT_2,
            ActivationKind::Identity => 1.0,
        }
    }
}
