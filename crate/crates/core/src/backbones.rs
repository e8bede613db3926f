//! Convolutional feature extractors.
//!
//! The local encoder is a bottleneck residual network whose last two stages
//! trade their stride for dilation (rates 2 and 4), giving output stride 8.
//! The context encoder is a plain VGG/UNet-style stack of 8 convolutions and
//! 3 max-pools, also at output stride 8.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, geometry, Result};
use crate::nn::{ops, BatchNorm2d, Conv2d, Conv2dSpec, Mode, Scope};

/// Encoder output together with its stride relative to the encoder input.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `[B, C, H_f, W_f]`
    pub values: Tensor,
    pub stride: usize,
}

pub const OUTPUT_STRIDE: usize = 8;

fn check_input(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
        return Err(geometry!("{what} input {h}x{w} is not divisible by {OUTPUT_STRIDE}"));
    }
    Ok((h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEncoderConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// Bottleneck widths of the four stages.
    pub stage_widths: [usize; 4],
    pub blocks: [usize; 4],
    pub expansion: usize,
    pub stage_strides: [usize; 4],
    pub stage_dilations: [usize; 4],
}

impl ResidualEncoderConfig {
    /// 50-layer layout with stages 4 and 5 dilated.
    pub fn resnet50(in_channels: usize) -> Self {
        Self {
            in_channels,
            stem_width: 64,
            stage_widths: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
            expansion: 4,
            stage_strides: [1, 2, 1, 1],
            stage_dilations: [1, 1, 2, 4],
        }
    }

    /// Same topology with every width divided by `divisor` (at least 1).
    pub fn scaled(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        self.stem_width = (self.stem_width / d).max(1);
        for w in &mut self.stage_widths {
            *w = (*w / d).max(1);
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.stage_widths[3] * self.expansion
    }

    /// Stem conv and pool contribute 4.
    pub fn stride(&self) -> usize {
        4 * self.stage_strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride() != OUTPUT_STRIDE {
            return Err(config_err!("residual encoder stride plan gives {} instead of 8", self.stride()));
        }
        if self.blocks.contains(&0) || self.in_channels == 0 {
            return Err(config_err!("residual encoder stages need at least one block"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(vs: &Scope, c_in: usize, width: usize, c_out: usize, stride: usize, dilation: usize) -> Result<Self> {
        let downsample = if stride != 1 || c_in != c_out {
            let ds = vs.pp("downsample");
            Some((
                Conv2d::new(&ds.pp(0), c_in, c_out, Conv2dSpec::same(1).stride(stride))?,
                BatchNorm2d::new(&ds.pp(1), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&vs.pp("conv1"), c_in, width, Conv2dSpec::same(1))?,
            bn1: BatchNorm2d::new(&vs.pp("bn1"), width)?,
            conv2: Conv2d::new(
                &vs.pp("conv2"),
                width,
                width,
                Conv2dSpec::same(3).dilation(dilation).stride(stride),
            )?,
            bn2: BatchNorm2d::new(&vs.pp("bn2"), width)?,
            conv3: Conv2d::new(&vs.pp("conv3"), width, c_out, Conv2dSpec::same(1))?,
            bn3: BatchNorm2d::new(&vs.pp("bn3"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// Dilated bottleneck residual network.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    cfg: ResidualEncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl LocalEncoder {
    pub fn new(vs: &Scope, cfg: &ResidualEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2d::new(
            &vs.pp("conv1"),
            cfg.in_channels,
            cfg.stem_width,
            Conv2dSpec::same(7).stride(2),
        )?;
        let stem_bn = BatchNorm2d::new(&vs.pp("bn1"), cfg.stem_width)?;
        let mut c_in = cfg.stem_width;
        let mut prev_dilation = 1;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let vs_s = vs.pp(format!("layer{}", s + 1));
            let width = cfg.stage_widths[s];
            let c_out = width * cfg.expansion;
            let mut blocks = Vec::with_capacity(cfg.blocks[s]);
            for b in 0..cfg.blocks[s] {
                // The first block of a dilated stage keeps the previous rate.
                let (stride, dilation) =
                    if b == 0 { (cfg.stage_strides[s], prev_dilation) } else { (1, cfg.stage_dilations[s]) };
                blocks.push(Bottleneck::new(&vs_s.pp(b), c_in, width, c_out, stride, dilation)?);
                c_in = c_out;
            }
            prev_dilation = cfg.stage_dilations[s];
            stages.push(blocks);
        }
        Ok(Self { cfg: cfg.clone(), stem, stem_bn, stages })
    }

    pub fn config(&self) -> &ResidualEncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<FeatureMap> {
        check_input(image, "local encoder")?;
        let x = self.stem_bn.forward(&self.stem.forward(image)?, mode)?.relu()?;
        let mut x = ops::max_pool_3x3_s2(&x)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
        }
        Ok(FeatureMap { values: x, stride: OUTPUT_STRIDE })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoderConfig {
    pub in_channels: usize,
    /// Width of each conv pair; a 2x2 max-pool follows each of the first three.
    pub widths: [usize; 4],
}

impl ContextEncoderConfig {
    pub fn standard(in_channels: usize) -> Self {
        Self { in_channels, widths: [64, 128, 256, 512] }
    }

    pub fn scaled(mut self, divisor: usize) -> Self {
        for w in &mut self.widths {
            *w = (*w / divisor.max(1)).max(1);
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.widths[3]
    }

    /// `(c_in, c_out)` of the eight 3x3 convolutions in order.
    pub fn conv_channels(&self) -> Vec<(usize, usize)> {
        let mut c_in = self.in_channels;
        let mut out = Vec::with_capacity(8);
        for &w in &self.widths {
            out.push((c_in, w));
            out.push((w, w));
            c_in = w;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    cfg: ContextEncoderConfig,
    layers: Vec<(Conv2d, BatchNorm2d)>,
}

impl ContextEncoder {
    pub fn new(vs: &Scope, cfg: &ContextEncoderConfig) -> Result<Self> {
        let layers = cfg
            .conv_channels()
            .into_iter()
            .enumerate()
            .map(|(i, (c_in, c_out))| {
                let l = vs.pp(i);
                Ok((
                    Conv2d::new(&l.pp("conv"), c_in, c_out, Conv2dSpec::same(3).with_bias())?,
                    BatchNorm2d::new(&l.pp("bn"), c_out)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &ContextEncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<FeatureMap> {
        check_input(image, "context encoder")?;
        let mut x = image.clone();
        for (i, (conv, bn)) in self.layers.iter().enumerate() {
            x = bn.forward(&conv.forward(&x)?, mode)?.relu()?;
            if i % 2 == 1 && i < 7 {
                x = ops::max_pool_2x2(&x)?;
            }
        }
        Ok(FeatureMap { values: x, stride: OUTPUT_STRIDE })
    }
}
