//! SYENet assembly: head, two asymmetric fused stages, channel attention,
//! final convolution and a task-specific tail.

pub mod config;
pub mod model;

use crate::error::{shape_err, Result};
use crate::tensor::{add, add_channel_bias, channel_scale, concat_channels, conv2d, global_avg_pool, mul, sigmoid};
use crate::tensor::{Conv2dParams, Element, Tensor};

pub use config::{format_menu, parse_menu, FusionKind, MenuEntry, MenuKernel, SyeNetConfig, Task};
pub use model::{verify_models, BnMode, Mode, NamedParam, ParamKind, ParamSlot, Recorded, RepConv, SyeNetModel};

/// Quadratic connection: `f1 * f2` plus a per-channel bias.
pub fn qcu<T: Element>(f1: &Tensor<T>, f2: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    add_channel_bias(&mul(f1, f2)?, bias)
}

/// Fusion of the two branch outputs of an asymmetric stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion<T> {
    Qcu { bias: Vec<T> },
    Add,
    Mul,
    /// `2c -> c` 1x1 convolution over `concat(f1, f2)`.
    CatConv { conv: Conv2dParams<T> },
}

impl<T: Element> Fusion<T> {
    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Qcu { .. } => FusionKind::Qcu,
            Fusion::Add => FusionKind::Add,
            Fusion::Mul => FusionKind::Mul,
            Fusion::CatConv { .. } => FusionKind::CatConv,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Fusion::Qcu { bias } => bias.len(),
            Fusion::Add | Fusion::Mul => 0,
            Fusion::CatConv { conv } => conv.param_count(),
        }
    }
}

pub fn fuse_variant<T: Element>(fusion: &Fusion<T>, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
    match fusion {
        Fusion::Qcu { bias } => qcu(f1, f2, bias),
        Fusion::Add => add(f1, f2),
        Fusion::Mul => mul(f1, f2),
        Fusion::CatConv { conv } => {
            if f1.dims() != f2.dims() {
                return shape_err(format!("cat-conv fusion of {} and {}", f1.dims(), f2.dims()));
            }
            conv2d(&concat_channels(&[f1, f2])?, conv)
        }
    }
}

/// Squeeze-and-excitation gate: `sigmoid(expand(reduce(gap(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention<T> {
    pub reduce: Conv2dParams<T>,
    pub expand: Conv2dParams<T>,
}

impl<T: Element> ChannelAttention<T> {
    pub fn new(reduce: Conv2dParams<T>, expand: Conv2dParams<T>) -> Result<Self> {
        let c = expand.c_out();
        if reduce.kernel() != (1, 1) || expand.kernel() != (1, 1) {
            return shape_err("channel attention convolutions must be 1x1");
        }
        if reduce.c_in() != c || expand.c_in() != reduce.c_out() || !c.is_multiple_of(reduce.c_out()) {
            return shape_err(format!(
                "channel attention maps {}->{}->{}, expected c->c/r->c",
                reduce.c_in(),
                reduce.c_out(),
                c
            ));
        }
        Ok(ChannelAttention { reduce, expand })
    }

    pub fn channels(&self) -> usize {
        self.expand.c_out()
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }

    /// Per-channel gate of shape `(n, c, 1, 1)`, strictly inside `(0, 1)`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = conv2d(&global_avg_pool(x), &self.reduce)?;
        Ok(sigmoid(&conv2d(&z, &self.expand)?))
    }
}

/// `x` rescaled by its channel-attention gate.
pub fn channel_attention<T: Element>(x: &Tensor<T>, params: &ChannelAttention<T>) -> Result<Tensor<T>> {
    channel_scale(x, &params.gate(x)?)
}
