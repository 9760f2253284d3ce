//! Small deterministic differentiable numerics: dense matrices, same-length
//! 1D convolution, activations, and a reverse-mode tape.

mod check;
mod matrix;
mod tape;

pub use check::{finite_diff_check, FdConfig};
pub use matrix::Matrix;
pub use tape::{sigmoid, Gradients, ParamId, Tape, Var, PROB_EPS};

use rand::Rng;

use crate::error::{Error, Result};

/// Weights of a same-length 1D convolution.
///
/// `weight` is stored as `out x (in * kernel)` with entry `[o][i * kernel + j]`
/// multiplying input channel `i` at temporal offset `j - padding`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Matrix,
    pub bias: Matrix,
    pub kernel: usize,
}

impl ConvParams {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        let p = Self {
            weight: Matrix::zeros(out_channels, in_channels * kernel),
            bias: Matrix::zeros(out_channels, 1),
            kernel,
        };
        p.validate()?;
        Ok(p)
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and bias.
    pub fn uniform<R: Rng>(out_channels: usize, in_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(out_channels, in_channels, kernel)?;
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        for v in p.weight.as_mut_slice() {
            *v = rng.random_range(-bound..bound);
        }
        for v in p.bias.as_mut_slice() {
            *v = rng.random_range(-bound..bound);
        }
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_channels(&self) -> usize {
        if self.kernel == 0 { 0 } else { self.weight.cols() / self.kernel }
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Weight entry for output `o`, input `i`, tap `j`.
    pub fn w(&self, o: usize, i: usize, j: usize) -> f64 {
        self.weight.get(o, i * self.kernel + j)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel", format!("must be odd, got {}", self.kernel)));
        }
        if self.weight.cols() % self.kernel != 0 {
            return Err(Error::dims(
                "ConvParams",
                format!("weight columns divisible by kernel {}", self.kernel),
                self.weight.cols().to_string(),
            ));
        }
        if self.bias.shape() != (self.weight.rows(), 1) {
            return Err(Error::dims(
                "ConvParams",
                format!("bias {}x1", self.weight.rows()),
                format!("bias {}x{}", self.bias.rows(), self.bias.cols()),
            ));
        }
        Ok(())
    }
}

/// Activation selector for [`activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Tape-free convolution forward pass.
pub fn conv1d(input: &Matrix, params: &ConvParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone())?;
    let w = tape.constant(params.weight.clone())?;
    let b = tape.constant(params.bias.clone())?;
    let y = tape.conv1d(x, w, b, params.kernel)?;
    Ok(tape.value(y).clone())
}

/// Tape-free elementwise activation.
pub fn activation(input: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
    }
}
