//! Fire-Residual (FR) module.
//!
//! A 1x1 squeeze conv reduces `C` input channels to `s = C / 2^k`; two
//! parallel expand convs (1x1 and 3x3, `C/2` kernels each) are concatenated
//! back to `C` channels and added to the module input. Every conv is
//! followed by batch norm and leaky ReLU; nothing follows the addition.

use serde::Serialize;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layer::{conv_param_count, ConvLayer, ConvSpec, Recorder};

/// Squeeze exponent used when none is configured.
pub const DEFAULT_SQUEEZE_EXPONENT: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrConfig {
    input_channels: usize,
    squeeze_exponent: u32,
    squeeze: usize,
    expand_1x1: usize,
    expand_3x3: usize,
}

impl FrConfig {
    /// Derives `s = C / 2^k` and `e1 = e3 = C / 2`.
    pub fn new(input_channels: usize, squeeze_exponent: u32) -> Result<Self> {
        if input_channels == 0 || squeeze_exponent == 0 {
            return Err(Error::Config(format!(
                "FR module needs C > 0 and k > 0 (C={input_channels}, k={squeeze_exponent})"
            )));
        }
        let ratio = 1usize
            .checked_shl(squeeze_exponent)
            .filter(|r| *r <= input_channels)
            .ok_or_else(|| {
                Error::Config(format!(
                    "C={input_channels} is not divisible by 2^k with k={squeeze_exponent}"
                ))
            })?;
        if input_channels % ratio != 0 {
            return Err(Error::Config(format!(
                "C={input_channels} is not divisible by 2^k={ratio} (k={squeeze_exponent})"
            )));
        }
        // k >= 1 and 2^k | C imply C is even, so e1 = e3 = C/2 is exact.
        Ok(FrConfig {
            input_channels,
            squeeze_exponent,
            squeeze: input_channels / ratio,
            expand_1x1: input_channels / 2,
            expand_3x3: input_channels / 2,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn squeeze_exponent(&self) -> u32 {
        self.squeeze_exponent
    }

    pub fn squeeze(&self) -> usize {
        self.squeeze
    }

    pub fn expand_1x1(&self) -> usize {
        self.expand_1x1
    }

    pub fn expand_3x3(&self) -> usize {
        self.expand_3x3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrModule {
    pub config: FrConfig,
    /// Whether the input is added to the concatenated expand output.
    pub residual: bool,
    pub squeeze: ConvSpec,
    pub expand_1x1: ConvSpec,
    pub expand_3x3: ConvSpec,
}

/// Exponent actually used for a stage of `channels` channels: when the
/// channel count is a power of two below `2^k` the squeeze layer bottoms out
/// at a single kernel. Other channel counts keep `k` (and fail the
/// divisibility check if it does not hold).
pub fn stage_exponent(channels: usize, k: u32) -> u32 {
    if channels.is_power_of_two() && channels > 1 && channels.trailing_zeros() < k {
        channels.trailing_zeros()
    } else {
        k
    }
}

pub fn build_fr_module(config: FrConfig) -> FrModule {
    let c = config.input_channels;
    let s = config.squeeze;
    FrModule {
        config,
        residual: true,
        squeeze: ConvSpec::hidden(c, s, 1, 1),
        expand_1x1: ConvSpec::hidden(s, config.expand_1x1, 1, 1),
        expand_3x3: ConvSpec::hidden(s, config.expand_3x3, 3, 1),
    }
}

impl FrModule {
    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn channels(&self) -> usize {
        self.config.input_channels
    }

    /// Squeeze, expand 1x1, expand 3x3.
    pub fn convs(&self) -> [ConvSpec; 3] {
        [self.squeeze, self.expand_1x1, self.expand_3x3]
    }

    pub fn allocate(&self) -> Vec<ConvLayer> {
        self.convs().iter().map(ConvSpec::allocate).collect()
    }

    /// Records the module on the recorder's tape. `layers` are the weights
    /// of [`FrModule::convs`] in order.
    pub fn record(&self, rec: &mut Recorder<'_>, node: usize, layers: &[ConvLayer], x: Var) -> Result<Var> {
        let [sq, e1, e3] = self.convs();
        let squeezed = rec.conv_block((node, 0), &sq, &layers[0], x)?;
        let a = rec.conv_block((node, 1), &e1, &layers[1], squeezed)?;
        let b = rec.conv_block((node, 2), &e3, &layers[2], squeezed)?;
        let expanded = rec.tape.concat_channels(a, b)?;
        if self.residual {
            rec.tape.add(x, expanded).map_err(|e| Error::Build {
                node: format!("fr{node}"),
                detail: e.to_string(),
            })
        } else {
            Ok(expanded)
        }
    }
}

/// Conv weights and biases of an FR module:
/// `(C*s + s) + (s*e1 + e1) + (9*s*e3 + e3)`. Batch norm is not included.
pub fn fr_param_count(config: &FrConfig) -> u64 {
    let (c, s) = (config.input_channels, config.squeeze);
    conv_param_count(c, s, 1) + conv_param_count(s, config.expand_1x1, 1) + conv_param_count(s, config.expand_3x3, 3)
}

/// Darknet-style residual block: 1x1 `C -> C/2`, 3x3 `C/2 -> C`, add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResidualBlock {
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "residual block needs an even channel count, got {channels}"
            )));
        }
        Ok(ResidualBlock { channels })
    }

    pub fn convs(&self) -> [ConvSpec; 2] {
        let c = self.channels;
        [ConvSpec::hidden(c, c / 2, 1, 1), ConvSpec::hidden(c / 2, c, 3, 1)]
    }

    pub fn allocate(&self) -> Vec<ConvLayer> {
        self.convs().iter().map(ConvSpec::allocate).collect()
    }

    pub fn record(&self, rec: &mut Recorder<'_>, node: usize, layers: &[ConvLayer], x: Var) -> Result<Var> {
        let [reduce, restore] = self.convs();
        let h = rec.conv_block((node, 0), &reduce, &layers[0], x)?;
        let y = rec.conv_block((node, 1), &restore, &layers[1], h)?;
        rec.tape.add(x, y)
    }
}

pub fn residual_block_param_count(channels: usize) -> u64 {
    conv_param_count(channels, channels / 2, 1) + conv_param_count(channels / 2, channels, 3)
}
