//! Convolution block descriptors and their instantiated weights.
//!
//! A [`ConvSpec`] is the architecture-level description (no weights); a
//! [`ConvLayer`] owns the tensors; [`Recorder`] replays a block on a tape.

use serde::Serialize;

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::Result;
use crate::nn::{BatchNormParams, ConvParams, BN_MOMENTUM, LEAKY_SLOPE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Leaky,
    Linear,
}

/// Conv followed by optional batch norm and an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl ConvSpec {
    /// Hidden block: batch norm + leaky ReLU.
    pub fn hidden(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            batch_norm: true,
            activation: Activation::Leaky,
        }
    }

    /// Linear 1x1 output conv with bias only.
    pub fn linear_1x1(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            batch_norm: false,
            activation: Activation::Linear,
        }
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Weights plus biases: `K^2 * Cin * Cout + Cout`.
    pub fn conv_params(&self) -> u64 {
        conv_param_count(self.in_channels, self.out_channels, self.kernel)
    }

    /// Batch-norm scale, shift, mean and variance.
    pub fn bn_params(&self) -> u64 {
        if self.batch_norm {
            4 * self.out_channels as u64
        } else {
            0
        }
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    /// Multiply-accumulates at the given input resolution.
    pub fn macs(&self, in_h: usize, in_w: usize) -> u64 {
        let (oh, ow) = (self.out_size(in_h) as u64, self.out_size(in_w) as u64);
        (self.kernel * self.kernel * self.in_channels * self.out_channels) as u64 * oh * ow
    }

    /// Elementwise ops after the conv: one per output element for BN and
    /// one for the activation.
    pub fn elementwise_ops(&self, in_h: usize, in_w: usize) -> u64 {
        let outputs = (self.out_channels * self.out_size(in_h) * self.out_size(in_w)) as u64;
        let per = u64::from(self.batch_norm) + u64::from(self.activation == Activation::Leaky);
        outputs * per
    }

    /// Zero weights, identity batch norm.
    pub fn allocate(&self) -> ConvLayer {
        ConvLayer {
            conv: ConvParams::zeros(self.in_channels, self.out_channels, self.kernel, self.stride)
                .expect("ConvSpec kernels are 1 or 3"),
            bn: self
                .batch_norm
                .then(|| BatchNormParams::identity(self.out_channels)),
        }
    }
}

/// `kernel^2 * C * N + N`: weights plus one bias per kernel.
pub fn conv_param_count(in_channels: usize, kernels: usize, kernel_size: usize) -> u64 {
    let (c, n, k) = (in_channels as u64, kernels as u64, kernel_size as u64);
    k * k * c * n + n
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub conv: ConvParams<f32>,
    pub bn: Option<BatchNormParams<f32>>,
}

impl ConvLayer {
    /// Conv weights and biases only.
    pub fn conv_param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, BatchNormParams::param_count)
    }

    /// Serialized order: weight, bias, then BN scale, shift, mean, var.
    pub fn tensors(&self) -> Vec<&Tensor<f32>> {
        let mut out = vec![&self.conv.weight, &self.conv.bias];
        if let Some(bn) = &self.bn {
            out.extend([&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = vec![&mut self.conv.weight, &mut self.conv.bias];
        if let Some(bn) = &mut self.bn {
            out.extend([
                &mut bn.scale,
                &mut bn.shift,
                &mut bn.running_mean,
                &mut bn.running_var,
            ]);
        }
        out
    }
}

/// Identifies one conv block: (graph node id, conv index within the node).
pub type ParamKey = (usize, usize);

/// Tape handles of a conv block's trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub scale: Option<Var>,
    pub shift: Option<Var>,
}

/// Replays conv blocks on a tape, remembering the parameter handles and
/// (in training mode) the batch statistics of every batch norm.
pub struct Recorder<'t> {
    pub tape: &'t mut Tape<f32>,
    pub training: bool,
    /// Record parameters as trainable leaves.
    pub trainable: bool,
    pub vars: Vec<(ParamKey, ConvVars)>,
    pub batch_stats: Vec<(ParamKey, BatchStats<f32>)>,
}

impl<'t> Recorder<'t> {
    pub fn new(tape: &'t mut Tape<f32>, training: bool, trainable: bool) -> Self {
        Recorder {
            tape,
            training,
            trainable,
            vars: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    fn leaf(&mut self, t: &Tensor<f32>) -> Var {
        if self.trainable {
            self.tape.param(t.clone())
        } else {
            self.tape.constant(t.clone())
        }
    }

    pub fn conv_block(&mut self, key: ParamKey, spec: &ConvSpec, layer: &ConvLayer, x: Var) -> Result<Var> {
        let weight = self.leaf(&layer.conv.weight);
        let bias = self.leaf(&layer.conv.bias);
        let mut y = self
            .tape
            .conv2d(x, weight, bias, spec.stride, spec.padding())?;
        let mut vars = ConvVars {
            weight,
            bias,
            scale: None,
            shift: None,
        };
        if let Some(bn) = &layer.bn {
            let scale = self.leaf(&bn.scale);
            let shift = self.leaf(&bn.shift);
            let mode = if self.training {
                BatchNormMode::Train {
                    epsilon: bn.epsilon,
                }
            } else {
                BatchNormMode::Eval {
                    running_mean: bn.running_mean.data(),
                    running_var: bn.running_var.data(),
                    epsilon: bn.epsilon,
                }
            };
            let (out, stats) = self.tape.batch_norm(y, scale, shift, mode)?;
            if let Some(stats) = stats {
                self.batch_stats.push((key, stats));
            }
            vars.scale = Some(scale);
            vars.shift = Some(shift);
            y = out;
        }
        if spec.activation == Activation::Leaky {
            y = self.tape.leaky_relu(y, LEAKY_SLOPE as f32);
        }
        self.vars.push((key, vars));
        Ok(y)
    }
}

/// Folds recorded batch statistics into a layer's running averages.
pub fn apply_batch_stats(layer: &mut ConvLayer, stats: &BatchStats<f32>) {
    if let Some(bn) = &mut layer.bn {
        bn.update_running(stats, BN_MOMENTUM as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count_values() {
        assert_eq!(conv_param_count(64, 128, 3), 73_856);
        assert_eq!(conv_param_count(1, 1, 1), 2);
        assert_eq!(conv_param_count(3, 32, 3), 896);
    }

    #[test]
    fn allocated_layer_matches_analytic_count() {
        let spec = ConvSpec::hidden(5, 7, 3, 2);
        let layer = spec.allocate();
        assert_eq!(layer.conv_param_count() as u64, spec.conv_params());
        assert_eq!(layer.total_param_count() as u64, spec.conv_params() + spec.bn_params());
    }

    #[test]
    fn pointwise_linear_flops() {
        let spec = ConvSpec::linear_1x1(1, 1);
        assert_eq!(spec.macs(1, 1), 1);
        assert_eq!(spec.elementwise_ops(1, 1), 0);
    }
}
