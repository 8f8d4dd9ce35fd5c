//! Parameter containers generic over their element type, so the same
//! structure holds tensors, tape variables, gradients or optimizer moments.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{GradTape, Tensor, Var};

/// `y = x @ w + b` with `w: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl Linear<Tensor> {
    /// Gaussian weights scaled by `gain / sqrt(in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[input, output], gain / (input as f64).sqrt(), rng),
            b: Tensor::zeros(&[1, output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[input, output]),
            b: Tensor::zeros(&[1, output]),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            w: Tensor::identity(n),
            b: Tensor::zeros(&[1, n]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::linear(x, &self.w, &self.b)
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            w: f(&format!("{prefix}.w"), &self.w),
            b: f(&format!("{prefix}.b"), &self.b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}
