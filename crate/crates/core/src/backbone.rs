//! One hourglass stage split into stem, encoder trunk and decoder head.
//!
//! ```text
//! image ─stem─▶ a1 (1/4) ─trunk─▶ a2 (1/32) ─head─▶ a3 (1/4, p channels)
//!                 │          │  skips (1/4, 1/8, 1/16)  ▲
//!                 └──────────┴───────────────────────────┘
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfaError, Result};
use crate::graph::{Graph, Value};
use crate::layers::{BatchNorm2d, Conv2d, ConvInit, ConvTranspose2d, ResidualBlock};
use crate::params::ParamStore;

/// Total downsampling between the image and the bottleneck.
pub const TOTAL_DOWNSAMPLING: usize = 32;
/// Downsampling between the image and the stem output / heatmaps.
pub const STEM_STRIDE: usize = 4;

/// Standard deviation of the heatmap output layer at initialization.
pub const OUTPUT_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Mini,
    #[serde(rename = "resnet50-like")]
    Resnet50Like,
    #[serde(rename = "resnet101-like")]
    Resnet101Like,
    #[serde(rename = "resnet152-like")]
    Resnet152Like,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Mini => "mini",
            Preset::Resnet50Like => "resnet50-like",
            Preset::Resnet101Like => "resnet101-like",
            Preset::Resnet152Like => "resnet152-like",
        })
    }
}

impl FromStr for Preset {
    type Err = CfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Preset::Mini),
            "resnet50-like" => Ok(Preset::Resnet50Like),
            "resnet101-like" => Ok(Preset::Resnet101Like),
            "resnet152-like" => Ok(Preset::Resnet152Like),
            other => Err(CfaError::Config(format!("unknown backbone preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub preset: Preset,
    /// Channels of the stem output `a1`.
    pub stem_channels: usize,
    /// Residual blocks after the stem pooling (the first residual group).
    pub stem_blocks: usize,
    /// Output channels of encoder groups 2–4.
    pub block_channels: [usize; 3],
    pub blocks_per_stage: [usize; 3],
    pub deconv_kernel: usize,
    pub num_joints: usize,
}

impl BackboneConfig {
    /// Slim layouts whose block counts follow the ResNet-50/101/152 ladder.
    pub fn preset(preset: Preset, num_joints: usize) -> Self {
        let (stem_channels, stem_blocks, block_channels, blocks_per_stage) = match preset {
            Preset::Mini => (8, 1, [16, 32, 64], [1, 1, 1]),
            Preset::Resnet50Like => (16, 3, [32, 64, 128], [4, 6, 3]),
            Preset::Resnet101Like => (16, 3, [32, 64, 128], [4, 23, 3]),
            Preset::Resnet152Like => (16, 3, [32, 64, 128], [8, 36, 3]),
        };
        BackboneConfig {
            preset,
            stem_channels,
            stem_blocks,
            block_channels,
            blocks_per_stage,
            deconv_kernel: 4,
            num_joints,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0
            || self.num_joints == 0
            || self.block_channels.contains(&0)
            || self.blocks_per_stage.contains(&0)
        {
            return Err(CfaError::Config(
                "channel and block counts must be positive".into(),
            ));
        }
        if self.deconv_kernel < 2 || !self.deconv_kernel.is_multiple_of(2) {
            return Err(CfaError::Config(format!(
                "deconv_kernel must be even and at least 2, got {}",
                self.deconv_kernel
            )));
        }
        Ok(())
    }

    /// Padding that makes a stride-2 transposed convolution exactly double.
    pub fn deconv_pad(&self) -> usize {
        (self.deconv_kernel - 2) / 2
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.block_channels[2]
    }
}

/// The three taps of a stage: low-level input, bottleneck, heatmap.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTriple {
    pub a1: Value,
    pub a2: Value,
    pub y: Value,
}

/// Encoder activations consumed by the decoder of the same forward pass,
/// ordered from high to low resolution (1/4, 1/8, 1/16).
#[derive(Clone, Copy, Debug)]
pub struct Skips(pub [Value; 3]);

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
struct UpBlock {
    deconv: ConvTranspose2d,
    bn: BatchNorm2d,
    skip: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Option<Stem>,
    groups: [Vec<ResidualBlock>; 3],
    ups: [UpBlock; 3],
    out: Conv2d,
}

impl Backbone {
    /// Registers parameters under `prefix`. Stages after the first are built
    /// without a stem and consume an aggregated `a1` instead.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        with_stem: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c1 = config.stem_channels;
        let stem = if with_stem {
            let conv = Conv2d::new(
                store,
                &format!("{prefix}.stem.conv"),
                3,
                c1,
                7,
                2,
                3,
                false,
                ConvInit::He,
                rng,
            )?;
            let bn = BatchNorm2d::new(store, &format!("{prefix}.stem.bn"), c1, 1.0)?;
            let blocks = (0..config.stem_blocks)
                .map(|b| ResidualBlock::new(store, &format!("{prefix}.stem.block{b}"), c1, c1, 1, rng))
                .collect::<Result<Vec<_>>>()?;
            Some(Stem { conv, bn, blocks })
        } else {
            None
        };

        let mut in_ch = c1;
        let mut groups: [Vec<ResidualBlock>; 3] = Default::default();
        for (gi, group) in groups.iter_mut().enumerate() {
            let out_ch = config.block_channels[gi];
            for b in 0..config.blocks_per_stage[gi] {
                let stride = if b == 0 { 2 } else { 1 };
                group.push(ResidualBlock::new(
                    store,
                    &format!("{prefix}.trunk.group{gi}.block{b}"),
                    in_ch,
                    out_ch,
                    stride,
                    rng,
                )?);
                in_ch = out_ch;
            }
        }

        let up_channels = [config.block_channels[1], config.block_channels[0], c1];
        let mut ups = Vec::with_capacity(3);
        for (ui, &out_ch) in up_channels.iter().enumerate() {
            let deconv = ConvTranspose2d::new(
                store,
                &format!("{prefix}.head.up{ui}.deconv"),
                in_ch,
                out_ch,
                config.deconv_kernel,
                2,
                config.deconv_pad(),
                false,
                rng,
            )?;
            let bn = BatchNorm2d::new(store, &format!("{prefix}.head.up{ui}.bn"), out_ch, 1.0)?;
            // The skip at this resolution has exactly `out_ch` channels.
            let skip = Conv2d::new(
                store,
                &format!("{prefix}.head.up{ui}.skip"),
                out_ch,
                out_ch,
                1,
                1,
                0,
                true,
                ConvInit::He,
                rng,
            )?;
            ups.push(UpBlock { deconv, bn, skip });
            in_ch = out_ch;
        }
        let out = Conv2d::new(
            store,
            &format!("{prefix}.head.out"),
            c1,
            config.num_joints,
            1,
            1,
            0,
            true,
            ConvInit::Normal(OUTPUT_INIT_STD),
            rng,
        )?;
        let ups: [UpBlock; 3] = ups.try_into().expect("three upsampling blocks");
        Ok(Backbone {
            config: config.clone(),
            stem,
            groups,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn has_stem(&self) -> bool {
        self.stem.is_some()
    }

    /// f₁: image `[N, 3, H, W]` → a1 `[N, C1, H/4, W/4]`.
    pub fn stem_forward(&self, g: &mut Graph, image: Value) -> Result<Value> {
        let stem = self
            .stem
            .as_ref()
            .ok_or_else(|| CfaError::shape("this stage has no stem; feed an aggregated a1"))?;
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(CfaError::shape(format!("image must have 3 channels, got {c}")));
        }
        if h % TOTAL_DOWNSAMPLING != 0 || w % TOTAL_DOWNSAMPLING != 0 {
            return Err(CfaError::shape(format!(
                "image size {h}x{w} must be divisible by {TOTAL_DOWNSAMPLING}"
            )));
        }
        let x = stem.conv.forward(g, image)?;
        let x = stem.bn.forward(g, x)?;
        let x = g.relu(x);
        let mut x = g.max_pool2(x)?;
        for block in &stem.blocks {
            x = block.forward(g, x)?;
        }
        Ok(x)
    }

    /// f₂: a1 → bottleneck a2, capturing decoder skips.
    pub fn trunk_forward(&self, g: &mut Graph, a1: Value) -> Result<(Value, Skips)> {
        let (_, c, h, w) = g.value(a1).dims4()?;
        let div = TOTAL_DOWNSAMPLING / STEM_STRIDE;
        if c != self.config.stem_channels || h % div != 0 || w % div != 0 {
            return Err(CfaError::shape(format!(
                "trunk input [{c}, {h}, {w}] needs {} channels and spatial size divisible by {div}",
                self.config.stem_channels
            )));
        }
        let mut taps = [a1; 3];
        let mut x = a1;
        for (gi, group) in self.groups.iter().enumerate() {
            for block in group {
                x = block.forward(g, x)?;
            }
            if gi < 2 {
                taps[gi + 1] = x;
            }
        }
        Ok((x, Skips(taps)))
    }

    /// f₃: bottleneck plus skips → raw heatmap a3 at the resolution of a1.
    pub fn head_forward(&self, g: &mut Graph, a2: Value, skips: &Skips) -> Result<Value> {
        let mut x = a2;
        for (ui, up) in self.ups.iter().enumerate() {
            let skip = skips.0[2 - ui];
            let h = up.deconv.forward(g, x)?;
            let h = up.bn.forward(g, h)?;
            let h = g.relu(h);
            let (_, _, sh, sw) = g.value(skip).dims4()?;
            let (_, _, hh, hw) = g.value(h).dims4()?;
            if (sh, sw) != (hh, hw) {
                return Err(CfaError::shape(format!(
                    "skip {ui} is {sh}x{sw} but the decoder is at {hh}x{hw}"
                )));
            }
            let s = up.skip.forward(g, skip)?;
            x = g.add(h, s)?;
        }
        self.out.forward(g, x)
    }

    /// f = f₃ ∘ f₂ ∘ f₁ with the taps exposed; `y` is the raw head output.
    pub fn forward(&self, g: &mut Graph, image: Value) -> Result<FeatureTriple> {
        let a1 = self.stem_forward(g, image)?;
        let (a2, skips) = self.trunk_forward(g, a1)?;
        let y = self.head_forward(g, a2, &skips)?;
        Ok(FeatureTriple { a1, a2, y })
    }

    /// Runs trunk and head on a given a1 (stages without a stem).
    pub fn forward_from_a1(&self, g: &mut Graph, a1: Value) -> Result<FeatureTriple> {
        let (a2, skips) = self.trunk_forward(g, a1)?;
        let y = self.head_forward(g, a2, &skips)?;
        Ok(FeatureTriple { a1, a2, y })
    }
}
