//! Encoder-decoder and decoder-only transformers over patch + text streams.

mod mask;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mask::{build_prefix_mask, causal_mask, relbias_bucket, relbias_buckets, relbias_index, PrefixMask};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vision::{ConvStage, ConvStageConfig, LinearPatch, VisionStem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum StemConfig {
    /// Residual convolution stage with `blocks` blocks of base width `width`.
    Conv { blocks: usize, width: usize },
    /// Flattened patches through one linear map.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers_enc: usize,
    /// Decoder depth. The decoder-only variant stacks `layers_enc + layers_dec`.
    pub layers_dec: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    /// Image height and width in pixels.
    pub image_hw: [usize; 2],
    pub patch: usize,
    pub channels: usize,
    /// Pixels enter the stem as `(x - pixel_mean) / pixel_std`. The toy
    /// default maps the white scene background to zero.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub stem: StemConfig,
    /// Patch grid the relative bias table is sized for.
    pub relbias_grid: [usize; 2],
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Initial value of the scalar on the tied output projection.
    pub logit_scale_init: f64,
}

/// The toy configuration; `vocab` is replaced by the tokenizer size at run time.
impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy(512)
    }
}

impl ModelConfig {
    /// Small default sized for 32x32 synthetic scenes.
    pub fn toy(vocab: usize) -> Self {
        ModelConfig {
            variant: Variant::EncoderDecoder,
            layers_enc: 2,
            layers_dec: 2,
            heads: 4,
            hidden: 48,
            ffn_dim: 128,
            vocab,
            max_text_len: 32,
            image_hw: [32, 32],
            patch: 4,
            channels: 3,
            pixel_mean: 1.0,
            pixel_std: 1.0,
            stem: StemConfig::Conv { blocks: 3, width: 8 },
            relbias_grid: [8, 8],
            dropout: 0.0,
            ln_eps: 1e-5,
            init_std: 0.02,
            logit_scale_init: 0.0,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw[0] / self.patch.max(1), self.image_hw[1] / self.patch.max(1))
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn relbias_buckets(&self) -> usize {
        relbias_buckets((self.relbias_grid[0], self.relbias_grid[1]))
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.max_text_len < 2 {
            return bad(format!("max_text_len must be at least 2, got {}", self.max_text_len));
        }
        if self.vocab == 0 || self.ffn_dim == 0 || self.channels == 0 {
            return bad("vocab, ffn_dim and channels must be positive".into());
        }
        if self.variant == Variant::EncoderDecoder && (self.layers_enc == 0 || self.layers_dec == 0) {
            return bad("encoder-decoder needs at least one layer on each side".into());
        }
        if self.layers_enc + self.layers_dec == 0 {
            return bad("model needs at least one layer".into());
        }
        crate::vision::num_patches(self.image_hw[0], self.image_hw[1], self.patch)?;
        if self.relbias_grid.contains(&0) {
            return bad("relbias grid must be non-empty".into());
        }
        if !(self.pixel_mean.is_finite() && self.pixel_std.is_finite() && self.pixel_std > 0.0) {
            return bad(format!("pixel_std {} must be positive and finite", self.pixel_std));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let StemConfig::Conv { blocks, width } = self.stem {
            if width == 0 {
                return bad("conv stage width must be positive".into());
            }
            ConvStageConfig::for_patch(blocks, self.patch, width)?.validate(self.patch)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    attn: Attention,
    cross: Option<(Norm, Attention)>,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Layout {
    token: ParamId,
    pos_text: ParamId,
    pos_image: ParamId,
    relbias: ParamId,
    logit_scale: ParamId,
    stem: VisionStem,
    enc: Vec<Block>,
    enc_ln: Option<Norm>,
    dec: Vec<Block>,
    dec_ln: Norm,
}

/// A classification head on one or more concatenated readout vectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
    pub readouts: usize,
}

#[derive(Clone, Debug)]
struct Head {
    spec: HeadSpec,
    w: ParamId,
    b: ParamId,
}

/// Conditioning computed once per example and reused across decoding
/// steps.
#[derive(Clone, Debug)]
pub enum Context {
    /// Encoder output for the encoder-decoder variant; `None` for an empty
    /// prefix, in which case the decoder skips cross-attention.
    Memory { states: Option<Var>, n_patches: usize, text_offset: usize },
    /// Embedded prefix for the decoder-only variant.
    Prefix { embedded: Option<Var>, len: usize, n_patches: usize, text_offset: usize },
}

impl Context {
    pub fn n_patches(&self) -> usize {
        match *self {
            Context::Memory { n_patches, .. } | Context::Prefix { n_patches, .. } => n_patches,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    heads: Vec<Head>,
}

fn norm<T: Real, R: rand::Rng + ?Sized>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d: usize) -> Result<Norm> {
    Ok(Norm { g: pb.ones(&format!("{name}.g"), &[d])?, b: pb.zeros(&format!("{name}.b"), &[d])? })
}

fn attention<T: Real, R: rand::Rng + ?Sized>(
    pb: &mut ParamBuilder<'_, T, R>,
    name: &str,
    d: usize,
) -> Result<Attention> {
    Ok(Attention {
        q: pb.normal(&format!("{name}.q"), &[d, d])?,
        k: pb.normal(&format!("{name}.k"), &[d, d])?,
        v: pb.normal(&format!("{name}.v"), &[d, d])?,
        o: pb.normal(&format!("{name}.o"), &[d, d])?,
    })
}

fn block<T: Real, R: rand::Rng + ?Sized>(
    pb: &mut ParamBuilder<'_, T, R>,
    prefix: &str,
    attn_name: &str,
    cross: bool,
    cfg: &ModelConfig,
) -> Result<Block> {
    let d = cfg.hidden;
    let ln1 = norm(pb, &format!("{prefix}.ln1"), d)?;
    let attn = attention(pb, &format!("{prefix}.{attn_name}"), d)?;
    let cross = if cross {
        Some((norm(pb, &format!("{prefix}.ln_cross"), d)?, attention(pb, &format!("{prefix}.cross"), d)?))
    } else {
        None
    };
    let ln2 = norm(pb, &format!("{prefix}.ln2"), d)?;
    let ffn = Ffn {
        w1: pb.normal(&format!("{prefix}.ffn.w1"), &[d, cfg.ffn_dim])?,
        b1: pb.zeros(&format!("{prefix}.ffn.b1"), &[cfg.ffn_dim])?,
        w2: pb.normal(&format!("{prefix}.ffn.w2"), &[cfg.ffn_dim, d])?,
        b2: pb.zeros(&format!("{prefix}.ffn.b2"), &[d])?,
    };
    Ok(Block { ln1, attn, cross, ln2, ffn })
}

impl<T: Real> Model<T> {
    /// Fresh weights drawn from a ChaCha stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, &mut rng, config.init_std);
        let d = config.hidden;
        let token = pb.normal("embed.token", &[config.vocab, d])?;
        let pos_text = pb.normal("embed.pos_text", &[config.max_text_len, d])?;
        let pos_image = pb.normal("embed.pos_image", &[config.num_patches(), d])?;
        let relbias = pb.zeros("relbias.table", &[config.heads, config.relbias_buckets()])?;
        let logit_scale = pb.store.add("head.lm.scale", Tensor::from_f64(&[1], &[config.logit_scale_init])?)?;
        let stem = match config.stem {
            StemConfig::Conv { blocks, width } => {
                let cs = ConvStageConfig::for_patch(blocks, config.patch, width)?;
                VisionStem::Conv(ConvStage::build(&mut pb, &cs, config.channels, d)?)
            }
            StemConfig::Linear => VisionStem::Linear(LinearPatch::build(&mut pb, config.patch, config.channels, d)?),
        };
        let (enc, enc_ln, dec) = match config.variant {
            Variant::EncoderDecoder => {
                let enc = (0..config.layers_enc)
                    .map(|i| block(&mut pb, &format!("enc.layer{i}"), "attn", false, &config))
                    .collect::<Result<Vec<_>>>()?;
                let enc_ln = norm(&mut pb, "enc.ln_f", d)?;
                let dec = (0..config.layers_dec)
                    .map(|i| block(&mut pb, &format!("dec.layer{i}"), "self", true, &config))
                    .collect::<Result<Vec<_>>>()?;
                (enc, Some(enc_ln), dec)
            }
            Variant::DecoderOnly => {
                let dec = (0..config.layers_enc + config.layers_dec)
                    .map(|i| block(&mut pb, &format!("dec.layer{i}"), "self", false, &config))
                    .collect::<Result<Vec<_>>>()?;
                (Vec::new(), None, dec)
            }
        };
        let dec_ln = norm(&mut pb, "dec.ln_f", d)?;
        let layout = Layout { token, pos_text, pos_image, relbias, logit_scale, stem, enc, enc_ln, dec, dec_ln };
        Ok(Model { config, params: store, layout, heads: Vec::new() })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.layout.token
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.layout.logit_scale
    }

    /// Register a linear head `head.{name}.{w,b}` reading `readouts`
    /// concatenated hidden vectors.
    pub fn add_head(&mut self, spec: HeadSpec, seed: u64) -> Result<()> {
        if spec.classes < 2 {
            return Err(Error::Config(format!("head {} needs at least 2 classes", spec.name)));
        }
        if spec.readouts == 0 {
            return Err(Error::Config(format!("head {} needs at least one readout", spec.name)));
        }
        if self.head(&spec.name).is_some() {
            return Err(Error::Config(format!("head {} already exists", spec.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut self.params, &mut rng, self.config.init_std);
        let w = pb.normal(&format!("head.{}.w", spec.name), &[spec.readouts * self.config.hidden, spec.classes])?;
        let b = pb.zeros(&format!("head.{}.b", spec.name), &[spec.classes])?;
        self.heads.push(Head { spec, w, b });
        Ok(())
    }

    pub fn head(&self, name: &str) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.spec.name == name).map(|h| &h.spec)
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadSpec> {
        self.heads.iter().map(|h| &h.spec)
    }

    /// Patch tokens plus image positions: `[C, H, W] -> [T_i, D]`.
    pub fn embed_image(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let image = self.normalize_pixels(g, image)?;
        let tokens = self.layout.stem.forward(g, image)?;
        let n = g.shape(tokens)[0];
        let table = self.params.tensor(self.layout.pos_image).shape()[0];
        if n > table {
            return Err(Error::PositionOverflow { kind: "image", len: n, max: table });
        }
        let pos_table = g.param(self.layout.pos_image);
        let ids: Vec<u32> = (0..n as u32).collect();
        let pos = g.embedding(pos_table, &ids)?;
        g.add(tokens, pos)
    }

    fn normalize_pixels(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let (mean, std) = (self.config.pixel_mean, self.config.pixel_std);
        if mean == 0.0 && std == 1.0 {
            return Ok(image);
        }
        let shape = g.shape(image).to_vec();
        let n: usize = shape.iter().product();
        let shift = g.constant(Tensor::new(shape, vec![T::from_f64(-mean); n])?);
        let centered = g.add(image, shift)?;
        if std == 1.0 {
            Ok(centered)
        } else {
            g.scale(centered, T::from_f64(1.0 / std))
        }
    }

    /// Token embeddings plus text positions `offset..offset + len`.
    pub fn embed_text(&self, g: &mut Graph<'_, T>, ids: &[u32], offset: usize) -> Result<Var> {
        let max = self.config.max_text_len;
        if offset + ids.len() > max {
            return Err(Error::PositionOverflow { kind: "text", len: offset + ids.len(), max });
        }
        let table = g.param(self.layout.token);
        let tok = g.embedding(table, ids)?;
        let pos_table = g.param(self.layout.pos_text);
        let pos_ids: Vec<u32> = (offset as u32..(offset + ids.len()) as u32).collect();
        let pos = g.embedding(pos_table, &pos_ids)?;
        g.add(tok, pos)
    }

    /// Image tokens followed by text tokens, `[T_i + T_t, D]`. No modality
    /// embedding is added. Returns the stream and `T_i`.
    pub fn embed_inputs(
        &self,
        g: &mut Graph<'_, T>,
        image: Option<Var>,
        ids: &[u32],
        offset: usize,
    ) -> Result<(Var, usize)> {
        let img = image.map(|x| self.embed_image(g, x)).transpose()?;
        let n_patches = img.map_or(0, |v| g.shape(v)[0]);
        let parts: Vec<Var> = match (img, ids.is_empty()) {
            (Some(i), true) => vec![i],
            (Some(i), false) => vec![i, self.embed_text(g, ids, offset)?],
            (None, false) => vec![self.embed_text(g, ids, offset)?],
            (None, true) => return Err(Error::Sample("empty input: no image and no text".into())),
        };
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        Ok((x, n_patches))
    }

    /// Image grid of the first `n_patches` stream positions.
    fn image_grid(&self, n_patches: usize) -> (usize, usize) {
        let (gh, gw) = self.config.grid();
        if gh * gw == n_patches {
            (gh, gw)
        } else {
            // a square grid of a different size, e.g. while probing resolution
            let side = (n_patches as f64).sqrt().round() as usize;
            (side, n_patches / side.max(1))
        }
    }

    /// Relative bias logits `[H, len, len]` for patch-patch pairs.
    fn relbias(&self, g: &mut Graph<'_, T>, n_patches: usize, len: usize) -> Result<Option<Var>> {
        if n_patches == 0 {
            return Ok(None);
        }
        let table_grid = (self.config.relbias_grid[0], self.config.relbias_grid[1]);
        let index = relbias_index(self.image_grid(n_patches), table_grid, len);
        let table = g.param(self.layout.relbias);
        g.gather_bias(table, index, len, len).map(Some)
    }

    fn layer_norm(&self, g: &mut Graph<'_, T>, x: Var, n: &Norm) -> Result<Var> {
        let (gain, bias) = (g.param(n.g), g.param(n.b));
        g.layer_norm(x, gain, bias, self.config.ln_eps)
    }

    fn attend(
        &self,
        g: &mut Graph<'_, T>,
        p: &Attention,
        xq: Var,
        xkv: Var,
        mask: Option<Arc<Mask>>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let (wq, wk, wv, wo) = (g.param(p.q), g.param(p.k), g.param(p.v), g.param(p.o));
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let (q, k, v) = (g.split_heads(q, heads)?, g.split_heads(k, heads)?, g.split_heads(v, heads)?);
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, T::from_f64(1.0 / (self.config.head_dim() as f64).sqrt()))?;
        let s = match bias {
            Some(b) => g.add(s, b)?,
            None => s,
        };
        let a = g.masked_softmax(s, mask)?;
        let o = g.matmul(a, v)?;
        let o = g.merge_heads(o)?;
        g.matmul(o, wo)
    }

    fn block_forward(
        &self,
        g: &mut Graph<'_, T>,
        b: &Block,
        x: Var,
        mask: Option<Arc<Mask>>,
        bias: Option<Var>,
        memory: Option<Var>,
    ) -> Result<Var> {
        let rate = self.config.dropout;
        let h = self.layer_norm(g, x, &b.ln1)?;
        let a = self.attend(g, &b.attn, h, h, mask, bias)?;
        let a = g.dropout(a, rate)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, cross)), Some(mem)) = (&b.cross, memory) {
            let h = self.layer_norm(g, x, ln)?;
            let a = self.attend(g, cross, h, mem, None, None)?;
            let a = g.dropout(a, rate)?;
            x = g.add(x, a)?;
        }
        let h = self.layer_norm(g, x, &b.ln2)?;
        let (w1, b1, w2, b2) = (g.param(b.ffn.w1), g.param(b.ffn.b1), g.param(b.ffn.w2), g.param(b.ffn.b2));
        let f = g.matmul(h, w1)?;
        let f = g.add_bias(f, b1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, b2)?;
        let f = g.dropout(f, rate)?;
        g.add(x, f)
    }

    /// Fully bidirectional encoder; relative bias on the first `n_patches`
    /// positions only.
    pub fn encoder_forward(&self, g: &mut Graph<'_, T>, x: Var, n_patches: usize) -> Result<Var> {
        let enc_ln =
            self.layout.enc_ln.as_ref().ok_or_else(|| Error::Config("decoder-only model has no encoder".into()))?;
        let len = g.shape(x)[0];
        let bias = self.relbias(g, n_patches, len)?;
        let mut h = x;
        for b in &self.layout.enc {
            h = self.block_forward(g, b, h, None, bias, None)?;
        }
        self.layer_norm(g, h, enc_ln)
    }

    /// Causal decoder over embedded inputs `y[T_d, D]` with full
    /// cross-attention to `memory` when there is one.
    pub fn decoder_forward(&self, g: &mut Graph<'_, T>, y: Var, memory: Option<Var>) -> Result<Var> {
        if self.config.variant != Variant::EncoderDecoder {
            return Err(Error::Config("decoder_forward needs the encoder-decoder variant".into()));
        }
        let mask = causal_mask(g.shape(y)[0]);
        let mut h = y;
        for b in &self.layout.dec {
            h = self.block_forward(g, b, h, Some(mask.clone()), None, memory)?;
        }
        self.layer_norm(g, h, &self.layout.dec_ln)
    }

    /// Single stack under a prefix mask; the first `n_patches` positions are
    /// patches.
    pub fn decoder_only_forward(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: &PrefixMask,
        n_patches: usize,
    ) -> Result<Var> {
        if self.config.variant != Variant::DecoderOnly {
            return Err(Error::Config("decoder_only_forward needs the decoder-only variant".into()));
        }
        let len = g.shape(x)[0];
        if mask.len() != len {
            return Err(Error::Shape(format!("prefix mask of {} for sequence of {len}", mask.len())));
        }
        let bias = self.relbias(g, n_patches, len)?;
        let mut h = x;
        for b in &self.layout.dec {
            h = self.block_forward(g, b, h, Some(mask.mask()), bias, None)?;
        }
        self.layer_norm(g, h, &self.layout.dec_ln)
    }

    /// Tied projection: `scale * hidden . embed.token^T`.
    pub fn lm_logits(&self, g: &mut Graph<'_, T>, hidden: Var) -> Result<Var> {
        let table = g.param(self.layout.token);
        let logits = g.matmul_nt(hidden, table)?;
        let s = g.param(self.layout.logit_scale);
        g.mul_scalar(logits, s)
    }

    /// Mean of the first `n_patches` rows of encoder output.
    pub fn pooled_image_representation(&self, g: &mut Graph<'_, T>, states: Var, n_patches: usize) -> Result<Var> {
        if n_patches == 0 {
            return Err(Error::Sample("pooling over an empty image span".into()));
        }
        let patches = g.slice_rows(states, 0, n_patches)?;
        g.mean_rows(patches)
    }

    /// Encode the prefix (image and `source` text at positions
    /// `0..|source|`) once so any number of continuations can reuse it.
    pub fn context(&self, g: &mut Graph<'_, T>, image: Option<Var>, source: &[u32]) -> Result<Context> {
        let text_offset = source.len();
        if image.is_none() && source.is_empty() {
            return Ok(match self.config.variant {
                Variant::EncoderDecoder => Context::Memory { states: None, n_patches: 0, text_offset },
                Variant::DecoderOnly => Context::Prefix { embedded: None, len: 0, n_patches: 0, text_offset },
            });
        }
        let (x, n_patches) = self.embed_inputs(g, image, source, 0)?;
        match self.config.variant {
            Variant::EncoderDecoder => {
                let states = self.encoder_forward(g, x, n_patches)?;
                Ok(Context::Memory { states: Some(states), n_patches, text_offset })
            }
            Variant::DecoderOnly => {
                let len = g.shape(x)[0];
                Ok(Context::Prefix { embedded: Some(x), len, n_patches, text_offset })
            }
        }
    }

    /// Hidden states `[|cont|, D]` for continuation tokens `cont` (usually
    /// BOS-shifted targets) conditioned on `ctx`.
    pub fn continuation_hidden(&self, g: &mut Graph<'_, T>, ctx: &Context, cont: &[u32]) -> Result<Var> {
        if cont.is_empty() {
            return Err(Error::Sample("empty continuation".into()));
        }
        match *ctx {
            Context::Memory { states, text_offset, .. } => {
                let y = self.embed_text(g, cont, text_offset)?;
                self.decoder_forward(g, y, states)
            }
            Context::Prefix { embedded, len, n_patches, text_offset } => {
                let y = self.embed_text(g, cont, text_offset)?;
                let x = match embedded {
                    Some(e) => g.concat(&[e, y])?,
                    None => y,
                };
                let total = len + cont.len();
                let mask = build_prefix_mask(total, len);
                let h = self.decoder_only_forward(g, x, &mask, n_patches)?;
                g.slice_rows(h, len, total)
            }
        }
    }

    /// Bidirectional encoding of `ids` (after an optional image); returns
    /// the text rows `[|ids|, D]`.
    pub fn bidirectional_hidden(&self, g: &mut Graph<'_, T>, image: Option<Var>, ids: &[u32]) -> Result<Var> {
        let (x, n_patches) = self.embed_inputs(g, image, ids, 0)?;
        let len = g.shape(x)[0];
        let h = match self.config.variant {
            Variant::EncoderDecoder => self.encoder_forward(g, x, n_patches)?,
            Variant::DecoderOnly => self.decoder_only_forward(g, x, &build_prefix_mask(len, len), n_patches)?,
        };
        g.slice_rows(h, n_patches, len)
    }

    /// Logits of a classification head applied to the concatenated
    /// `readouts`, each a `[1, D]` or `[D]` vector. Returns `[1, C]`.
    pub fn head_logits(&self, g: &mut Graph<'_, T>, name: &str, readouts: &[Var]) -> Result<Var> {
        let head = self
            .heads
            .iter()
            .find(|h| h.spec.name == name)
            .ok_or_else(|| Error::Config(format!("no head named {name}")))?;
        if readouts.len() != head.spec.readouts {
            return Err(Error::Sample(format!(
                "head {name} expects {} readouts, got {}",
                head.spec.readouts,
                readouts.len()
            )));
        }
        let d = self.config.hidden;
        let flat = readouts.iter().map(|&r| g.reshape(r, &[d])).collect::<Result<Vec<_>>>()?;
        let x = if flat.len() == 1 { flat[0] } else { g.concat(&flat)? };
        let x = g.reshape(x, &[1, d * readouts.len()])?;
        let (w, b) = (g.param(head.w), g.param(head.b));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Activation of the last token of `text` read by the decoder, with the
    /// image as the only conditioning. Shape `[1, D]`.
    pub fn readout(&self, g: &mut Graph<'_, T>, image: Var, text: &[u32]) -> Result<Var> {
        let ctx = self.context(g, Some(image), &[])?;
        let h = self.continuation_hidden(g, &ctx, text)?;
        let n = g.shape(h)[0];
        g.slice_rows(h, n - 1, n)
    }
}
