//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{BnParams, Graph, Value};
use crate::params::{gaussian, he_normal, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvInit {
    He,
    Zero,
    /// Zero-mean normal with a fixed standard deviation.
    Normal(f64),
    /// Identity channel map; requires a 1×1 kernel with equal in/out channels.
    Identity,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: ConvInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = match init {
            ConvInit::He => he_normal(&shape, in_channels * kernel * kernel, rng),
            ConvInit::Zero => Tensor::zeros(&shape),
            ConvInit::Normal(std) => gaussian(&shape, std, rng),
            ConvInit::Identity => {
                assert!(kernel == 1 && in_channels == out_channels, "identity init needs a square 1x1 map");
                let mut t = Tensor::zeros(&shape);
                for c in 0..in_channels {
                    t.data_mut()[c * in_channels + c] = 1.0;
                }
                t
            }
        };
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        g.conv2d(x, self.weight, self.bias, self.stride, self.pad)
    }
}

/// Transposed convolution; `kernel = 2·stride` with `pad = stride / 2`
/// gives an exact ×stride upsampling.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Each output cell receives (kernel/stride)² taps per input channel.
        let taps = (kernel / stride).max(1);
        let w = he_normal(
            &[in_channels, out_channels, kernel, kernel],
            in_channels * taps * taps,
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        g.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub params: BnParams,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, gamma: f64) -> Result<Self> {
        let params = BnParams {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], gamma),
                ParamKind::Trainable,
            )?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
            )?,
        };
        Ok(BatchNorm2d { params, channels })
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        g.batch_norm(x, &self.params)
    }
}

/// Basic residual block: `shortcut(x) + bn2(conv2(relu(bn1(conv1(x)))))`.
///
/// The second normalization starts with zero scale, so a fresh block is the
/// (projected) identity. No rectification follows the addition, which keeps
/// the identity exact for inputs of either sign.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    projection: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            1,
            false,
            ConvInit::He,
            rng,
        )?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_channels, 1.0)?;
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            1,
            false,
            ConvInit::He,
            rng,
        )?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_channels, 0.0)?;
        let projection = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(
                    store,
                    &format!("{name}.proj"),
                    in_channels,
                    out_channels,
                    1,
                    stride,
                    0,
                    false,
                    ConvInit::He,
                    rng,
                )?,
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), out_channels, 1.0)?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        g.add(shortcut, h)
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }
}
