//! The three ablation variants built from the shared components.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::{ContextEncoder, ContextEncoderConfig, LocalEncoder, ResidualEncoderConfig, OUTPUT_STRIDE};
use crate::error::{config_err, contract, geometry, Result};
use crate::nn::{ops, Conv2d, Conv2dSpec, Mode, ParamStore, Scope};
use crate::transformer::{ContextTransformer, TransformerConfig};
use crate::windowing::WindowGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Local encoder and head only (FCN baseline).
    LocalOnly,
    /// Local encoder, self-attention transformer, head.
    LocalSelfAttn,
    /// Both encoders joined by the cross-attention transformer.
    WideContext,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::LocalOnly, Variant::LocalSelfAttn, Variant::WideContext];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::LocalOnly => "local_only",
            Variant::LocalSelfAttn => "local_self_attn",
            Variant::WideContext => "wide_context",
        }
    }

    pub fn uses_context(&self) -> bool {
        matches!(self, Variant::WideContext)
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config_err!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub geometry: WindowGeometry,
    pub transformer: TransformerConfig,
    pub local_encoder: ResidualEncoderConfig,
    pub context_encoder: ContextEncoderConfig,
    /// Hidden width of the 3x3 conv in each classifier head.
    pub head_width: usize,
}

impl ModelConfig {
    /// Full-width model: 50-layer local encoder, D = 512, L = 4, n = 4,
    /// 256 px local windows.
    pub fn full(variant: Variant, num_classes: usize, bands: usize) -> Self {
        let transformer = TransformerConfig::default();
        Self {
            variant,
            num_classes,
            geometry: WindowGeometry::default(),
            head_width: transformer.dim / 4,
            transformer,
            local_encoder: ResidualEncoderConfig::resnet50(bands),
            context_encoder: ContextEncoderConfig::standard(bands),
        }
    }

    /// Same topology with all widths divided by `divisor`.
    pub fn toy(variant: Variant, num_classes: usize, bands: usize, geometry: WindowGeometry, divisor: usize) -> Self {
        let mut cfg = Self::full(variant, num_classes, bands);
        let d = divisor.max(1);
        cfg.geometry = geometry;
        cfg.local_encoder = cfg.local_encoder.scaled(d);
        cfg.context_encoder = cfg.context_encoder.scaled(d);
        cfg.transformer.dim = (cfg.transformer.dim / d).max(cfg.transformer.heads);
        cfg.head_width = (cfg.transformer.dim / 4).max(1);
        cfg
    }

    /// Re-scales only the local encoder to full width divided by `divisor`.
    pub fn with_local_divisor(mut self, divisor: usize) -> Self {
        let bands = self.bands();
        self.local_encoder = ResidualEncoderConfig::resnet50(bands).scaled(divisor.max(1));
        self
    }

    pub fn bands(&self) -> usize {
        self.local_encoder.in_channels
    }

    pub fn local_feature_size(&self) -> (usize, usize) {
        (self.geometry.local_h / OUTPUT_STRIDE, self.geometry.local_w / OUTPUT_STRIDE)
    }

    pub fn context_feature_size(&self) -> (usize, usize) {
        let (h, w) = self.geometry.context_input_size();
        (h / OUTPUT_STRIDE, w / OUTPUT_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("need at least two classes, got {}", self.num_classes));
        }
        self.geometry.validate()?;
        self.local_encoder.validate()?;
        self.transformer.validate()?;
        let g = &self.geometry;
        if g.local_h % OUTPUT_STRIDE != 0 || g.local_w % OUTPUT_STRIDE != 0 {
            return Err(geometry!("local window {}x{} is not divisible by 8", g.local_h, g.local_w));
        }
        let (ch, cw) = g.context_input_size();
        if self.variant.uses_context() && (ch % OUTPUT_STRIDE != 0 || cw % OUTPUT_STRIDE != 0) {
            return Err(geometry!("context input {ch}x{cw} is not divisible by 8"));
        }
        if self.context_encoder.in_channels != self.bands() {
            return Err(config_err!("encoders disagree on the number of input bands"));
        }
        Ok(())
    }
}

/// 3x3 conv (replicate padded), ReLU, 1x1 conv to class scores, bilinear
/// upsampling to the branch input resolution.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub conv: Conv2d,
    pub classify: Conv2d,
}

impl ClassifierHead {
    pub fn new(vs: &Scope, c_in: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&vs.pp("conv"), c_in, hidden, Conv2dSpec::same(3).padding(0).with_bias())?,
            // Small scores at init: fan-out scaling over a handful of classes
            // starts the loss far above log(u).
            classify: Conv2d::with_std(&vs.pp("classify"), hidden, num_classes, Conv2dSpec::same(1).with_bias(), 0.01)?,
        })
    }

    pub fn forward(&self, features: &Tensor, out_size: (usize, usize)) -> Result<Tensor> {
        let x = features.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
        let x = self.conv.forward(&x)?.relu()?;
        let logits = self.classify.forward(&x)?;
        ops::upsample_bilinear(&logits, out_size.0, out_size.1)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationLogits {
    /// `[B, u, h_l, w_l]`
    pub local: Tensor,
    /// `[B, u, h_c/s, w_c/s]`, absent for single-branch variants.
    pub context: Option<Tensor>,
}

#[derive(Debug)]
pub struct SegmentationModel {
    cfg: ModelConfig,
    store: ParamStore,
    pub local_encoder: LocalEncoder,
    /// 1x1 conv from the local encoder width to the token width.
    pub reduce: Conv2d,
    pub transformer: Option<ContextTransformer>,
    pub context_encoder: Option<ContextEncoder>,
    pub local_head: ClassifierHead,
    pub context_head: Option<ClassifierHead>,
}

impl SegmentationModel {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let vs = store.root();
        let d = cfg.transformer.dim;
        let local_encoder = LocalEncoder::new(&vs.pp("local_encoder"), &cfg.local_encoder)?;
        let reduce = Conv2d::new(
            &vs.pp("reduce"),
            cfg.local_encoder.out_channels(),
            d,
            Conv2dSpec::same(1).with_bias(),
        )?;
        let local_grid = (d, cfg.local_feature_size());
        let (transformer, context_encoder, context_head) = match cfg.variant {
            Variant::LocalOnly => (None, None, None),
            Variant::LocalSelfAttn => (
                Some(ContextTransformer::new_self(&vs.pp("transformer"), &cfg.transformer, local_grid)?),
                None,
                None,
            ),
            Variant::WideContext => {
                let enc = ContextEncoder::new(&vs.pp("context_encoder"), &cfg.context_encoder)?;
                let t = ContextTransformer::new(
                    &vs.pp("transformer"),
                    &cfg.transformer,
                    local_grid,
                    (cfg.context_encoder.out_channels(), cfg.context_feature_size()),
                )?;
                let head = ClassifierHead::new(&vs.pp("context_head"), d, cfg.head_width, cfg.num_classes)?;
                (Some(t), Some(enc), Some(head))
            }
        };
        let local_head = ClassifierHead::new(&vs.pp("local_head"), d, cfg.head_width, cfg.num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            local_encoder,
            reduce,
            transformer,
            context_encoder,
            local_head,
            context_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Restarts the dropout streams, e.g. at an epoch boundary, so a resumed
    /// run draws the same masks as an uninterrupted one.
    pub fn reseed_dropout(&self, seed: u64) {
        if let Some(t) = &self.transformer {
            t.reseed_dropout(seed);
        }
    }

    /// `local`: `[B, c, h_l, w_l]`; `context`: `[B, c, h_c/s, w_c/s]`,
    /// required by the wide-context variant and ignored otherwise.
    pub fn forward(&self, local: &Tensor, context: Option<&Tensor>, mode: Mode) -> Result<SegmentationLogits> {
        let (_, _, h, w) = local.dims4()?;
        let features = self.local_encoder.forward(local, mode)?;
        let reduced = self.reduce.forward(&features.values)?;
        match self.cfg.variant {
            Variant::LocalOnly => Ok(SegmentationLogits { local: self.local_head.forward(&reduced, (h, w))?, context: None }),
            Variant::LocalSelfAttn => {
                let t = self.transformer.as_ref().expect("built with transformer");
                let enriched = t.forward_self(&reduced, mode)?;
                Ok(SegmentationLogits { local: self.local_head.forward(&enriched, (h, w))?, context: None })
            }
            Variant::WideContext => {
                let context = context.ok_or_else(|| contract!("wide-context forward needs a context image"))?;
                let (_, _, ch, cw) = context.dims4()?;
                let ctx_features = self.context_encoder.as_ref().expect("built with context encoder").forward(context, mode)?;
                let t = self.transformer.as_ref().expect("built with transformer");
                let (local_out, ctx_out) = t.forward(&reduced, &ctx_features.values, mode)?;
                let head = self.context_head.as_ref().expect("built with context head");
                Ok(SegmentationLogits {
                    local: self.local_head.forward(&local_out, (h, w))?,
                    context: Some(head.forward(&ctx_out, (ch, cw))?),
                })
            }
        }
    }
}
