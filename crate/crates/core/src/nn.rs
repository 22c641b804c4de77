//! Layer parameter types and eager (tape-free) versions of the
//! differentiable ops.

use crate::autodiff::{BatchNormMode, BatchStats, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Negative-side slope of the leaky ReLU used after every hidden conv.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// (Cout, Cin, K, K)
    pub weight: Tensor<T>,
    /// (Cout)
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub kernel_size: usize,
}

impl<T: Scalar> ConvParams<T> {
    /// Builds a "same"-padded convolution: padding is `(K - 1) / 2`.
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize) -> Result<Self> {
        let (cout, _, kh, kw) = weight.dims4()?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Config(format!(
                "kernel size must be 1 or 3, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} for Cout={cout}", bias.shape()),
            ));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding: (kh - 1) / 2,
            kernel_size: kh,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![out_channels, in_channels, kernel_size, kernel_size]),
            Tensor::zeros(vec![out_channels]),
            stride,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Number of weight and bias elements.
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            scale: Tensor::full(vec![channels], T::one()),
            shift: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            epsilon: T::from_f64_lossy(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.shift, &self.running_mean, &self.running_var]
            .iter()
            .any(|t| t.numel() != c)
        {
            return Err(Error::shape("batch_norm", "parameter vectors differ in length"));
        }
        if self.epsilon < T::zero() || self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain(
                "batch norm requires epsilon >= 0 and running_var >= 0".into(),
            ));
        }
        Ok(())
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + take * b;
        }
    }

    /// Number of stored values: scale, shift, mean and variance.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let y = tape.conv2d(x, w, b, params.stride, params.padding)?;
    Ok(tape.take_value(y))
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { slope * v })
}

/// Inference mode normalizes with the running statistics. Training mode
/// normalizes with batch statistics and folds them into the running ones.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let scale = tape.constant(params.scale.clone());
    let shift = tape.constant(params.shift.clone());
    let mode = if training {
        BatchNormMode::Train {
            epsilon: params.epsilon,
        }
    } else {
        BatchNormMode::Eval {
            running_mean: params.running_mean.data(),
            running_var: params.running_var.data(),
            epsilon: params.epsilon,
        }
    };
    let (y, stats) = tape.batch_norm(x, scale, shift, mode)?;
    if let Some(stats) = stats {
        params.update_running(&stats, T::from_f64_lossy(BN_MOMENTUM));
    }
    Ok(tape.take_value(y))
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.concat_channels(va, vb)?;
    Ok(tape.take_value(y))
}

pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.add(va, vb)?;
    Ok(tape.take_value(y))
}

pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.upsample2x(x)?;
    Ok(tape.take_value(y))
}
