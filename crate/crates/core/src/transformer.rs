//! Context transformer: local feature tokens attend over context tokens.
//!
//! Both feature maps are cut into `p x p` patches, linearly embedded to width
//! `D` and offset by a learned per-position table (one table per branch).
//! Each block then updates the local tokens only:
//!
//! ```text
//! t_l = t_l + CrossAttn(LN(t_l), LN(t_c))
//! t_l = t_l + MLP(LN(t_l))
//! ```
//!
//! where the queries come from the local tokens and keys/values from the
//! context tokens. With `t_c = t_l` this is an ordinary pre-norm ViT block.

use std::sync::Mutex;

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, geometry, Result};
use crate::nn::{ops, Init, LayerNorm, Linear, Mode, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Number of blocks `L`.
    pub depth: usize,
    /// Attention heads `n`.
    pub heads: usize,
    /// Patch side `p` in feature cells.
    pub patch: usize,
    /// Token width `D`.
    pub dim: usize,
    pub mlp_ratio: usize,
    /// Also run self-attention blocks on the context tokens.
    #[serde(default)]
    pub context_self_attention: bool,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            patch: 1,
            dim: 512,
            mlp_ratio: 4,
            context_self_attention: false,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.heads == 0 || self.dim == 0 {
            return Err(config_err!("patch size, heads and token width must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(config_err!("token width {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Embedded tokens `[B, count, D]` with the grid they came from.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    /// Feature map size `(H_f, W_f)` before patching.
    pub spatial: (usize, usize),
    pub patch: usize,
}

impl TokenSequence {
    pub fn count(&self) -> usize {
        (self.spatial.0 / self.patch) * (self.spatial.1 / self.patch)
    }

    /// Tokens back to a `[B, D, H_f, W_f]` map; each token fills its patch.
    pub fn to_feature_map(&self) -> Result<Tensor> {
        let (b, n, d) = self.tokens.dims3()?;
        let (gh, gw) = (self.spatial.0 / self.patch, self.spatial.1 / self.patch);
        debug_assert_eq!(n, gh * gw);
        let grid = self.tokens.transpose(1, 2)?.reshape((b, d, gh, gw))?;
        ops::upsample_repeat(&grid, self.patch)
    }
}

/// Flattened `p x p` patches followed by a linear projection and a learned
/// positional table.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    /// `[count, D]`
    pub pos: candle_core::Var,
    patch: usize,
    spatial: (usize, usize),
}

impl PatchEmbed {
    pub fn new(vs: &Scope, channels: usize, spatial: (usize, usize), patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || spatial.0 % patch != 0 || spatial.1 % patch != 0 {
            return Err(geometry!("{}x{} features are not divisible by patch {patch}", spatial.0, spatial.1));
        }
        let count = (spatial.0 / patch) * (spatial.1 / patch);
        Ok(Self {
            proj: Linear::new(&vs.pp("proj"), channels * patch * patch, dim)?,
            pos: vs.param("pos", (count, dim), Init::Normal { std: 0.02 })?,
            patch,
            spatial,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<TokenSequence> {
        let (b, c, h, w) = features.dims4()?;
        if (h, w) != self.spatial {
            return Err(geometry!(
                "patch embedding built for {}x{} features, got {h}x{w}",
                self.spatial.0,
                self.spatial.1
            ));
        }
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let patches = features
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = self.proj.forward(&patches)?.broadcast_add(self.pos.as_tensor())?;
        Ok(TokenSequence { tokens, spatial: (h, w), patch: p })
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(vs: &Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("token width {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(&vs.pp("q"), dim, dim)?,
            k: Linear::new(&vs.pp("k"), dim, dim)?,
            v: Linear::new(&vs.pp("v"), dim, dim)?,
            out: Linear::new(&vs.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Returns the projected output `[B, N, D]` and the attention matrices
    /// `[B, heads, N, M]`.
    pub fn forward_with_weights(&self, queries: &Tensor, keys: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = queries.dims3()?;
        let (_, m, dk) = keys.dims3()?;
        if m == 0 {
            return Err(contract!("attention over an empty key sequence"));
        }
        if dk != d {
            return Err(geometry!("query width {d} differs from key width {dk}"));
        }
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(keys)?)?;
        let v = self.split_heads(&self.v.forward(keys)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?;
        let attn = ops::softmax_last(&logits)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok((self.out.forward(&mixed)?, attn))
    }

    pub fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(queries, keys)?.0)
    }
}

/// Self-attention: queries, keys and values all from `t`.
pub fn msa(t: &Tensor, attn: &Attention) -> Result<(Tensor, Tensor)> {
    attn.forward_with_weights(t, t)
}

/// Local queries over context keys/values. Rows of the returned
/// `[B, heads, N, M]` matrix sum to one.
pub fn cross_attention(t_l: &Tensor, t_c: &Tensor, attn: &Attention) -> Result<(Tensor, Tensor)> {
    attn.forward_with_weights(t_l, t_c)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(vs: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&vs.pp("fc1"), dim, hidden)?, fc2: Linear::new(&vs.pp("fc2"), hidden, dim)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

#[derive(Debug)]
struct Dropout {
    p: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl Dropout {
    fn apply(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if self.p == 0.0 || mode == Mode::Eval {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = {
            let mut rng = self.rng.lock().expect("dropout rng poisoned");
            (0..x.elem_count()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
        };
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

impl Clone for Dropout {
    fn clone(&self) -> Self {
        let rng = self.rng.lock().expect("dropout rng poisoned").clone();
        Self { p: self.p, rng: Mutex::new(rng) }
    }
}

/// One pre-norm attention + MLP block.
#[derive(Debug, Clone)]
pub struct ContextBlock {
    pub norm_q: LayerNorm,
    /// Separate normalization of the key/value tokens; `None` for
    /// self-attention blocks, which reuse `norm_q`.
    pub norm_kv: Option<LayerNorm>,
    pub attn: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
    dropout: Dropout,
}

impl ContextBlock {
    pub fn new(vs: &Scope, cfg: &TransformerConfig, cross: bool, seed: u64) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm_q: LayerNorm::new(&vs.pp("norm_q"), d)?,
            norm_kv: if cross { Some(LayerNorm::new(&vs.pp("norm_kv"), d)?) } else { None },
            attn: Attention::new(&vs.pp("attn"), d, cfg.heads)?,
            norm_mlp: LayerNorm::new(&vs.pp("norm_mlp"), d)?,
            mlp: Mlp::new(&vs.pp("mlp"), d, d * cfg.mlp_ratio)?,
            dropout: Dropout { p: cfg.dropout, rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) },
        })
    }

    /// Updates `t_l` from `t_c`; the context tokens are left unchanged.
    pub fn forward(&self, t_l: &Tensor, t_c: &Tensor, mode: Mode) -> Result<Tensor> {
        let q = self.norm_q.forward(t_l)?;
        let kv = match &self.norm_kv {
            Some(n) => n.forward(t_c)?,
            None => self.norm_q.forward(t_c)?,
        };
        let t = (t_l + self.dropout.apply(&self.attn.forward(&q, &kv)?, mode)?)?;
        let update = self.mlp.forward(&self.norm_mlp.forward(&t)?)?;
        Ok((&t + self.dropout.apply(&update, mode)?)?)
    }

    /// Restarts the dropout mask stream.
    pub fn reseed_dropout(&self, seed: u64) {
        *self.dropout.rng.lock().expect("dropout rng poisoned") = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward_self(&self, t: &Tensor, mode: Mode) -> Result<Tensor> {
        let q = self.norm_q.forward(t)?;
        let t = (t + self.dropout.apply(&self.attn.forward(&q, &q)?, mode)?)?;
        let update = self.mlp.forward(&self.norm_mlp.forward(&t)?)?;
        Ok((&t + self.dropout.apply(&update, mode)?)?)
    }
}

/// Feature maps in, context-enriched feature maps out.
#[derive(Debug, Clone)]
pub struct ContextTransformer {
    cfg: TransformerConfig,
    pub local_embed: PatchEmbed,
    pub context_embed: Option<PatchEmbed>,
    pub blocks: Vec<ContextBlock>,
    pub context_blocks: Vec<ContextBlock>,
}

impl ContextTransformer {
    /// Cross-attention transformer over local `[c_l, H, W]` and context
    /// `[c_c, H', W']` features.
    pub fn new(
        vs: &Scope,
        cfg: &TransformerConfig,
        local: (usize, (usize, usize)),
        context: (usize, (usize, usize)),
    ) -> Result<Self> {
        cfg.validate()?;
        let local_embed = PatchEmbed::new(&vs.pp("local_embed"), local.0, local.1, cfg.patch, cfg.dim)?;
        let context_embed = PatchEmbed::new(&vs.pp("context_embed"), context.0, context.1, cfg.patch, cfg.dim)?;
        let blocks = (0..cfg.depth)
            .map(|i| ContextBlock::new(&vs.pp("blocks").pp(i), cfg, true, i as u64))
            .collect::<Result<_>>()?;
        let context_blocks = if cfg.context_self_attention {
            (0..cfg.depth)
                .map(|i| ContextBlock::new(&vs.pp("context_blocks").pp(i), cfg, false, 1000 + i as u64))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { cfg: cfg.clone(), local_embed, context_embed: Some(context_embed), blocks, context_blocks })
    }

    /// Self-attention-only transformer over the local features.
    pub fn new_self(vs: &Scope, cfg: &TransformerConfig, local: (usize, (usize, usize))) -> Result<Self> {
        cfg.validate()?;
        let local_embed = PatchEmbed::new(&vs.pp("local_embed"), local.0, local.1, cfg.patch, cfg.dim)?;
        let blocks = (0..cfg.depth)
            .map(|i| ContextBlock::new(&vs.pp("blocks").pp(i), cfg, false, i as u64))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), local_embed, context_embed: None, blocks, context_blocks: Vec::new() })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn embed(&self, local: &Tensor, context: &Tensor) -> Result<(TokenSequence, TokenSequence)> {
        let context_embed = self
            .context_embed
            .as_ref()
            .ok_or_else(|| contract!("self-attention transformer has no context branch"))?;
        Ok((self.local_embed.forward(local)?, context_embed.forward(context)?))
    }

    /// Returns `(F_l', F_c')`, both `[B, D, H, W]` at their input sizes.
    pub fn forward(&self, local: &Tensor, context: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (mut t_l, mut t_c) = self.embed(local, context)?;
        for (i, block) in self.blocks.iter().enumerate() {
            t_l.tokens = block.forward(&t_l.tokens, &t_c.tokens, mode)?;
            if let Some(cb) = self.context_blocks.get(i) {
                t_c.tokens = cb.forward_self(&t_c.tokens, mode)?;
            }
        }
        Ok((t_l.to_feature_map()?, t_c.to_feature_map()?))
    }

    pub fn reseed_dropout(&self, seed: u64) {
        for (i, b) in self.blocks.iter().chain(&self.context_blocks).enumerate() {
            b.reseed_dropout(seed.wrapping_add(i as u64));
        }
    }

    pub fn forward_self(&self, local: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut t = self.local_embed.forward(local)?;
        for block in &self.blocks {
            t.tokens = block.forward_self(&t.tokens, mode)?;
        }
        t.to_feature_map()
    }
}

/// Sums every attention row; used by tests and diagnostics.
pub fn attention_row_sums(attn: &Tensor) -> Result<Tensor> {
    Ok(attn.sum(D::Minus1)?)
}
