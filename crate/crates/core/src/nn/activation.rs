//! Scalar activations, written to stay finite for |x| up to 1e3.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => relu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`].
#[inline]
pub fn softplus_derivative(x: f64) -> f64 {
    sigmoid(x)
}

// keeps sigmoid_scaled strictly inside its open interval
const SIGMOID_MARGIN: f64 = 1e-12;

/// `lo + (hi - lo) * sigmoid(x)`, kept strictly inside `(lo, hi)`.
#[inline]
pub fn sigmoid_scaled(x: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * sigmoid(x).clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}

#[inline]
pub fn sigmoid_scaled_derivative(x: f64, lo: f64, hi: f64) -> f64 {
    let s = sigmoid(x);
    (hi - lo) * s * (1.0 - s)
}
