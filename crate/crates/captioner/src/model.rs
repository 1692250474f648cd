//! The three captioning architectures behind one configuration switch:
//! a patch-based visual encoder, a causal language decoder, and either
//! cross-attention inserted into the decoder blocks (vanilla) or a separate
//! fusion module whose logits can be self-ensembled with the decoder's.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::vocab;

/// Additive mask value for disallowed attention positions. Large enough to
/// zero the softmax weight, small enough to keep every intermediate finite.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-attention sublayers inserted into every decoder block.
    Vanilla,
    /// Fusion module only: logits come from the fusion head alone.
    FusionNoSe,
    /// Fusion module plus self-ensemble: decoder and fusion logits added.
    FullSe,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "fusion_no_se" => Ok(Variant::FusionNoSe),
            "full_se" => Ok(Variant::FullSe),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected vanilla | fusion_no_se | full_se)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::FusionNoSe => "fusion_no_se",
            Variant::FullSe => "full_se",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Extra encoder layers and extra cross-attention decoder layers
    /// (equal count). Zero for the vanilla variant.
    pub fusion_layers: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_patches: usize,
    pub dropout: f64,
    /// Tie the decoder output projection to the token embedding matrix.
    pub tied_output: bool,
    /// Give the fusion output projection a bias term.
    pub fusion_output_bias: bool,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; `vocab_size` must still be set by the caller.
    pub fn desk(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            fusion_layers: if variant == Variant::Vanilla { 0 } else { 2 },
            patch_size: 4,
            vocab_size,
            max_text_len: 24,
            max_patches: 256,
            dropout: 0.1,
            tied_output: true,
            fusion_output_bias: false,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        match self.variant {
            Variant::Vanilla if self.fusion_layers != 0 => {
                return Err(Error::Config(
                    "vanilla variant requires fusion_layers == 0".into(),
                ))
            }
            Variant::FusionNoSe | Variant::FullSe if self.fusion_layers == 0 => {
                return Err(Error::Config(
                    "non-vanilla variants require fusion_layers >= 1".into(),
                ))
            }
            _ => {}
        }
        if self.vocab_size <= vocab::UNK {
            return Err(Error::Config(format!(
                "vocab_size {} must cover the special tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn patches_for(&self, resolution: usize) -> Result<usize> {
        if resolution == 0 || resolution % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} not divisible by patch size {}",
                self.patch_size
            )));
        }
        let n = (resolution / self.patch_size) * (resolution / self.patch_size);
        if n > self.max_patches {
            return Err(Error::Config(format!(
                "resolution {resolution} yields {n} patches > max_patches {}",
                self.max_patches
            )));
        }
        Ok(n)
    }
}

/// Named parameter groups for freezing and per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
    Fusion,
}

pub const ALL_GROUPS: [Group; 3] = [Group::Encoder, Group::Decoder, Group::Fusion];

impl std::str::FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Group::Encoder),
            "decoder" => Ok(Group::Decoder),
            "fusion" => Ok(Group::Fusion),
            other => Err(Error::Config(format!(
                "unknown parameter group {other:?} (expected encoder | decoder | fusion)"
            ))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Fusion => "fusion",
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct LayerNormP {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AttnP {
    ln: LayerNormP,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct MlpP {
    ln: LayerNormP,
    fc: Linear,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct BlockP {
    attn: AttnP,
    cross: Option<AttnP>,
    mlp: MlpP,
}

struct Builder {
    store: ParamStore,
    groups: [Vec<ParamId>; 3],
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            groups: Default::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 0.02).expect("valid init distribution"),
        }
    }

    fn track(&mut self, group: Group, id: ParamId) -> ParamId {
        self.groups[group as usize].push(id);
        id
    }

    fn weight(&mut self, group: Group, name: String, rows: usize, cols: usize) -> ParamId {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.normal.sample(&mut self.rng)).collect();
        let id = self.store.add(name, Tensor { shape: vec![rows, cols], data });
        self.track(group, id)
    }

    fn zeros(&mut self, group: Group, name: String, rows: usize, cols: usize) -> ParamId {
        let id = self.store.add(name, Tensor::zeros(vec![rows, cols]));
        self.track(group, id)
    }

    fn ones(&mut self, group: Group, name: String, cols: usize) -> ParamId {
        let id = self.store.add(
            name,
            Tensor {
                shape: vec![1, cols],
                data: vec![1.0; cols],
            },
        );
        self.track(group, id)
    }

    fn linear(&mut self, group: Group, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            w: self.weight(group, format!("{name}.w"), d_in, d_out),
            b: bias.then(|| self.zeros(group, format!("{name}.b"), 1, d_out)),
        }
    }

    fn layer_norm(&mut self, group: Group, name: &str, d: usize) -> LayerNormP {
        LayerNormP {
            gain: self.ones(group, format!("{name}.g"), d),
            bias: self.zeros(group, format!("{name}.b"), 1, d),
        }
    }

    fn attn(&mut self, group: Group, name: &str, d: usize) -> AttnP {
        AttnP {
            ln: self.layer_norm(group, &format!("{name}.ln"), d),
            q: self.linear(group, &format!("{name}.q"), d, d, true),
            k: self.linear(group, &format!("{name}.k"), d, d, true),
            v: self.linear(group, &format!("{name}.v"), d, d, true),
            o: self.linear(group, &format!("{name}.o"), d, d, true),
        }
    }

    fn mlp(&mut self, group: Group, name: &str, d: usize) -> MlpP {
        MlpP {
            ln: self.layer_norm(group, &format!("{name}.ln"), d),
            fc: self.linear(group, &format!("{name}.fc"), d, 4 * d, true),
            proj: self.linear(group, &format!("{name}.proj"), 4 * d, d, true),
        }
    }

    /// A pre-norm residual block. `cross_group` moves the cross-attention
    /// sublayer into a different parameter group (the vanilla variant's
    /// inserted modules belong to the fusion group).
    fn block(&mut self, group: Group, name: &str, d: usize, cross_group: Option<Group>) -> BlockP {
        BlockP {
            attn: self.attn(group, &format!("{name}.attn"), d),
            cross: cross_group.map(|g| self.attn(g, &format!("{name}.cross"), d)),
            mlp: self.mlp(group, &format!("{name}.mlp"), d),
        }
    }
}

/// Per-layer, per-head cross-attention matrices `[text_len, n_patches]`
/// captured during a decode forward pass. Rows are softmax outputs.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

/// Result of a text decode forward pass; all handles live on the same tape.
pub struct DecodeOutput {
    pub logits: NodeId,
    pub h_g: NodeId,
    pub h_fuse: Option<NodeId>,
    /// The `W^G · h^G` addend (absent for fusion_no_se loss paths it is still
    /// exported so the self-ensemble sum can be recomposed externally).
    pub logits_g: NodeId,
    pub logits_fuse: Option<NodeId>,
    pub attention: AttentionRecord,
}

/// Full parameter set of one captioning model.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    resolution: usize,
    patch_proj: Linear,
    enc_pos: ParamId,
    enc_blocks: Vec<BlockP>,
    fusion_enc_blocks: Vec<BlockP>,
    enc_ln: LayerNormP,
    tok_emb: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<BlockP>,
    dec_ln: LayerNormP,
    fusion_dec_blocks: Vec<BlockP>,
    fusion_ln: Option<LayerNormP>,
    /// Untied decoder output projection, present only when `!tied_output`.
    w_g: Option<Linear>,
    w_fuse: Option<Linear>,
    groups: [Vec<ParamId>; 3],
}

impl CaptionModel {
    pub fn new(config: ModelConfig, resolution: usize, seed: u64) -> Result<CaptionModel> {
        config.validate()?;
        let n_patches = config.patches_for(resolution)?;
        let d = config.d_model;
        let mut b = Builder::new(seed);

        let patch_dim = config.patch_size * config.patch_size * 3;
        let patch_proj = b.linear(Group::Encoder, "enc.patch", patch_dim, d, true);
        let enc_pos = b.weight(Group::Encoder, "enc.pos".into(), n_patches, d);
        let enc_blocks = (0..config.encoder_layers)
            .map(|i| b.block(Group::Encoder, &format!("enc.block{i}"), d, None))
            .collect();
        let fusion_enc_blocks = (0..config.fusion_layers)
            .map(|i| b.block(Group::Fusion, &format!("fuse.enc{i}"), d, None))
            .collect();
        let enc_ln = b.layer_norm(Group::Encoder, "enc.ln_f", d);

        let tok_emb = b.weight(Group::Decoder, "dec.tok_emb".into(), config.vocab_size, d);
        let dec_pos = b.weight(Group::Decoder, "dec.pos".into(), config.max_text_len, d);
        let dec_blocks = (0..config.decoder_layers)
            .map(|i| {
                let cross = (config.variant == Variant::Vanilla).then_some(Group::Fusion);
                b.block(Group::Decoder, &format!("dec.block{i}"), d, cross)
            })
            .collect();
        let dec_ln = b.layer_norm(Group::Decoder, "dec.ln_f", d);

        let fusion_dec_blocks: Vec<BlockP> = (0..config.fusion_layers)
            .map(|i| b.block(Group::Fusion, &format!("fuse.dec{i}"), d, Some(Group::Fusion)))
            .collect();
        let fusion_ln = (config.variant != Variant::Vanilla)
            .then(|| b.layer_norm(Group::Fusion, "fuse.ln_f", d));
        let w_g = (!config.tied_output)
            .then(|| Linear {
                w: b.weight(Group::Decoder, "dec.w_g.w".into(), config.vocab_size, d),
                b: None,
            });
        let w_fuse = (config.variant != Variant::Vanilla).then(|| Linear {
            w: b.weight(Group::Fusion, "fuse.w_fuse.w".into(), config.vocab_size, d),
            b: config
                .fusion_output_bias
                .then(|| b.zeros(Group::Fusion, "fuse.w_fuse.b".into(), 1, config.vocab_size)),
        });

        Ok(CaptionModel {
            config,
            store: b.store,
            resolution,
            patch_proj,
            enc_pos,
            enc_blocks,
            fusion_enc_blocks,
            enc_ln,
            tok_emb,
            dec_pos,
            dec_blocks,
            dec_ln,
            fusion_dec_blocks,
            fusion_ln,
            w_g,
            w_fuse,
            groups: b.groups,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn n_patches(&self) -> usize {
        self.store.get(self.enc_pos).value.shape[0]
    }

    /// Disjoint, exhaustive partition of all parameters.
    pub fn parameter_groups(&self) -> BTreeMap<Group, &[ParamId]> {
        let mut map = BTreeMap::new();
        for g in ALL_GROUPS {
            map.insert(g, self.groups[g as usize].as_slice());
        }
        map
    }

    pub fn group_params(&self, group: Group) -> &[ParamId] {
        &self.groups[group as usize]
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for &id in &self.groups[group as usize] {
            self.store.get_mut(id).trainable = !frozen;
        }
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.groups[group as usize]
            .iter()
            .all(|&id| !self.store.get(id).trainable)
    }

    /// Bilinearly resample the encoder position-embedding grid to a new
    /// resolution (corner-aligned). Text position embeddings are untouched.
    pub fn interpolate_pos_embeddings(&mut self, new_resolution: usize) -> Result<()> {
        let new_patches = self.config.patches_for(new_resolution)?;
        if new_resolution == self.resolution {
            return Ok(());
        }
        let d = self.config.d_model;
        let old_side = (self.n_patches() as f64).sqrt().round() as usize;
        let new_side = (new_patches as f64).sqrt().round() as usize;
        let old = self.store.get(self.enc_pos).value.data.clone();
        let mut new_data = vec![0.0; new_patches * d];
        for gy in 0..new_side {
            for gx in 0..new_side {
                let (sy, fy) = src_coord(gy, new_side, old_side);
                let (sx, fx) = src_coord(gx, new_side, old_side);
                let (y1, x1) = ((sy + 1).min(old_side - 1), (sx + 1).min(old_side - 1));
                let dst = (gy * new_side + gx) * d;
                for c in 0..d {
                    let v00 = old[(sy * old_side + sx) * d + c];
                    let v01 = old[(sy * old_side + x1) * d + c];
                    let v10 = old[(y1 * old_side + sx) * d + c];
                    let v11 = old[(y1 * old_side + x1) * d + c];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    new_data[dst + c] = top + fy * (bot - top);
                }
            }
        }
        let p = self.store.get_mut(self.enc_pos);
        p.value = Tensor {
            shape: vec![new_patches, d],
            data: new_data,
        };
        p.grad = vec![0.0; new_patches * d];
        self.resolution = new_resolution;
        Ok(())
    }
}

/// Corner-aligned source coordinate: integer part + fraction.
fn src_coord(i: usize, new_side: usize, old_side: usize) -> (usize, f64) {
    if new_side <= 1 {
        return (0, 0.0);
    }
    let x = i as f64 * (old_side - 1) as f64 / (new_side - 1) as f64;
    let s = x.floor() as usize;
    let s = s.min(old_side - 1);
    (s, x - s as f64)
}

/// Split an `[H, W, 3]` image into flattened non-overlapping patches.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (h, w, c) = match image.shape.as_slice() {
        [h, w, c] if *c == 3 => (*h, *w, *c),
        other => {
            return Err(Error::Shape(format!(
                "expected [H, W, 3] image, got {other:?}"
            )))
        }
    };
    if h != w {
        return Err(Error::Config(format!("image must be square, got {h}x{w}")));
    }
    if h % patch_size != 0 {
        return Err(Error::Config(format!(
            "resolution {h} not divisible by patch size {patch_size}"
        )));
    }
    let side = h / patch_size;
    let pd = patch_size * patch_size * c;
    let mut out = Vec::with_capacity(side * side * pd);
    for gy in 0..side {
        for gx in 0..side {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let base = ((gy * patch_size + py) * w + gx * patch_size + px) * c;
                    out.extend_from_slice(&image.data[base..base + c]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, pd], out)
}

/// One forward pass under construction: a tape plus dropout state.
pub struct Forward<'m> {
    pub model: &'m CaptionModel,
    pub tape: Tape,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m> Forward<'m> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(model: &'m CaptionModel) -> Self {
        Forward {
            model,
            tape: Tape::new(),
            dropout: None,
        }
    }

    /// Training mode: dropout active (if configured), seeded for
    /// reproducibility.
    pub fn train(model: &'m CaptionModel, dropout_seed: u64) -> Self {
        let dropout = (model.config.dropout > 0.0)
            .then(|| (model.config.dropout, ChaCha8Rng::seed_from_u64(dropout_seed)));
        Forward {
            model,
            tape: Tape::new(),
            dropout,
        }
    }

    fn param(&mut self, id: ParamId) -> Result<NodeId> {
        self.tape.param(&self.model.store, id)
    }

    fn linear(&mut self, p: Linear, x: NodeId) -> Result<NodeId> {
        let w = self.param(p.w)?;
        let y = self.tape.matmul(x, w)?;
        match p.b {
            Some(b) => {
                let b = self.param(b)?;
                self.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    fn layer_norm(&mut self, p: LayerNormP, x: NodeId) -> Result<NodeId> {
        let g = self.param(p.gain)?;
        let b = self.param(p.bias)?;
        self.tape.layer_norm(x, g, b, self.model.config.layer_norm_eps)
    }

    fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let (r, c) = self.tape.shape(x);
        let keep = Bernoulli::new(1.0 - *p).expect("dropout in [0,1)");
        let scale = 1.0 / (1.0 - *p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if keep.sample(rng) { scale } else { 0.0 })
            .collect();
        self.tape.dropout(x, mask)
    }

    /// Multi-head attention sublayer with residual connection.
    /// `memory = None` is self-attention over the normed input.
    fn attention(
        &mut self,
        p: &AttnP,
        x: NodeId,
        memory: Option<NodeId>,
        causal: bool,
        record: Option<&mut Vec<Tensor>>,
    ) -> Result<NodeId> {
        let cfg = &self.model.config;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let xn = self.layer_norm(p.ln, x)?;
        let mem = memory.unwrap_or(xn);
        let q = self.linear(p.q, xn)?;
        let k = self.linear(p.k, mem)?;
        let v = self.linear(p.v, mem)?;
        let (tq, _) = self.tape.shape(q);
        let (tk, _) = self.tape.shape(k);
        let mask = causal.then(|| causal_mask(tq, tk));
        let mask_node = match mask {
            Some(m) => Some(self.tape.constant(tq, tk, m)?),
            None => None,
        };
        let mut heads_out = Vec::with_capacity(heads);
        let mut recorded = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = match mask_node {
                Some(m) => self.tape.add(scores, m)?,
                None => scores,
            };
            let probs = self.tape.softmax_rows(scores)?;
            if record.is_some() {
                recorded.push(self.tape.value(probs));
            }
            heads_out.push(self.tape.matmul(probs, vh)?);
        }
        if let Some(rec) = record {
            *rec = recorded;
        }
        let merged = self.tape.concat_cols(&heads_out)?;
        let out = self.linear(p.o, merged)?;
        let out = self.maybe_dropout(out)?;
        self.tape.add(x, out)
    }

    fn mlp(&mut self, p: &MlpP, x: NodeId) -> Result<NodeId> {
        let xn = self.layer_norm(p.ln, x)?;
        let h = self.linear(p.fc, xn)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(p.proj, h)?;
        let h = self.maybe_dropout(h)?;
        self.tape.add(x, h)
    }

    fn self_block(&mut self, p: &BlockP, x: NodeId, causal: bool) -> Result<NodeId> {
        let x = self.attention(&p.attn, x, None, causal, None)?;
        self.mlp(&p.mlp, x)
    }

    /// Encode an image into `V_info` (`[n_patches, d_model]`). The image
    /// resolution must match the model's current position-embedding grid.
    pub fn encode_image(&mut self, image: &Tensor) -> Result<NodeId> {
        let model = self.model;
        let patches = patchify(image, model.config.patch_size)?;
        let (n, pd) = patches.dims2()?;
        if n != model.n_patches() {
            return Err(Error::Config(format!(
                "image yields {n} patches but the model is configured for {} \
                 (interpolate position embeddings first)",
                model.n_patches()
            )));
        }
        let x = self.tape.constant(n, pd, patches.data)?;
        let x = self.linear(model.patch_proj, x)?;
        let pos = self.param(model.enc_pos)?;
        let mut x = self.tape.add(x, pos)?;
        x = self.maybe_dropout(x)?;
        let blocks: Vec<BlockP> = model
            .enc_blocks
            .iter()
            .chain(&model.fusion_enc_blocks)
            .cloned()
            .collect();
        for b in &blocks {
            x = self.self_block(b, x, false)?;
        }
        self.layer_norm(model.enc_ln, x)
    }

    /// Re-enter a precomputed `V_info` tensor as a constant (inference reuse
    /// across decode steps; no gradients flow to the encoder).
    pub fn inject_v_info(&mut self, v_info: &Tensor) -> Result<NodeId> {
        let (r, c) = v_info.dims2()?;
        self.tape.constant(r, c, v_info.data.clone())
    }

    /// Run the decoder (and fusion module) over a BOS-prefixed token prefix.
    /// Logits at position `t` depend only on `prefix[..=t]` and `V_info`.
    pub fn decode_text(&mut self, v_info: NodeId, prefix: &[usize]) -> Result<DecodeOutput> {
        let model = self.model;
        let cfg = &model.config;
        if prefix.is_empty() || prefix[0] != vocab::BOS {
            return Err(Error::Contract(format!(
                "token prefix must start with BOS, got {:?}",
                prefix.first()
            )));
        }
        if prefix.len() > cfg.max_text_len {
            return Err(Error::Contract(format!(
                "prefix length {} exceeds max_text_len {}",
                prefix.len(),
                cfg.max_text_len
            )));
        }
        let t = prefix.len();
        let emb = self.param(model.tok_emb)?;
        let tok = self.tape.embedding(emb, prefix)?;
        let pos_full = self.param(model.dec_pos)?;
        let pos = self.tape.slice_rows(pos_full, 0, t)?;
        let mut x = self.tape.add(tok, pos)?;
        x = self.maybe_dropout(x)?;

        let mut attention = AttentionRecord::default();
        let dec_blocks = model.dec_blocks.clone();
        for b in &dec_blocks {
            x = self.attention(&b.attn, x, None, true, None)?;
            if let Some(cross) = &b.cross {
                let mut rec = Vec::new();
                x = self.attention(cross, x, Some(v_info), false, Some(&mut rec))?;
                attention.layers.push(rec);
            }
            x = self.mlp(&b.mlp, x)?;
        }
        let h_g = self.layer_norm(model.dec_ln, x)?;
        let logits_g = match model.w_g {
            Some(p) => {
                let w = self.param(p.w)?;
                self.tape.matmul_nt(h_g, w)?
            }
            None => {
                // weight-tied projection through the token embedding matrix
                self.tape.matmul_nt(h_g, emb)?
            }
        };

        if cfg.variant == Variant::Vanilla {
            return Ok(DecodeOutput {
                logits: logits_g,
                h_g,
                h_fuse: None,
                logits_g,
                logits_fuse: None,
                attention,
            });
        }

        let mut y = x;
        let fusion_blocks = model.fusion_dec_blocks.clone();
        for b in &fusion_blocks {
            y = self.attention(&b.attn, y, None, true, None)?;
            let cross = b.cross.as_ref().expect("fusion decoder blocks cross-attend");
            let mut rec = Vec::new();
            y = self.attention(cross, y, Some(v_info), false, Some(&mut rec))?;
            attention.layers.push(rec);
            y = self.mlp(&b.mlp, y)?;
        }
        let h_fuse = self.layer_norm(model.fusion_ln.expect("non-vanilla has fusion ln"), y)?;
        let wf = model.w_fuse.expect("non-vanilla has fusion head");
        let w = self.param(wf.w)?;
        let mut logits_fuse = self.tape.matmul_nt(h_fuse, w)?;
        if let Some(b) = wf.b {
            let b = self.param(b)?;
            logits_fuse = self.tape.add_bias(logits_fuse, b)?;
        }
        let logits = match cfg.variant {
            Variant::FullSe => self.tape.add(logits_g, logits_fuse)?,
            Variant::FusionNoSe => logits_fuse,
            Variant::Vanilla => unreachable!(),
        };
        Ok(DecodeOutput {
            logits,
            h_g,
            h_fuse: Some(h_fuse),
            logits_g,
            logits_fuse: Some(logits_fuse),
            attention,
        })
    }
}

fn causal_mask(tq: usize, tk: usize) -> Vec<f64> {
    let mut m = vec![0.0; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            if j > i {
                m[i * tk + j] = MASK_NEG;
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Checkpoint format: manifest.json + params.bin (little-endian f64 in
// manifest order).
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    resolution: usize,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &CaptionModel, vocab_tokens: &[String], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            offset: blob.len() as u64,
        });
        for &v in &p.value.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.config.clone(),
        resolution: model.resolution,
        vocab: vocab_tokens.to_vec(),
        tensors,
    };
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, body + "\n")
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let blob_path = dir.join("params.bin");
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path.display().to_string(), e))
}

/// Load a checkpoint; every tensor shape is validated against the config the
/// manifest declares, and all mismatches are reported together.
pub fn load_checkpoint(dir: &Path) -> Result<(CaptionModel, Vec<String>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?,
    )
    .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let blob_path = dir.join("params.bin");
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;

    let mut model = CaptionModel::new(manifest.config, manifest.resolution, 0)?;
    let mut by_name: BTreeMap<String, ParamId> = BTreeMap::new();
    for (id, p) in model.store.iter() {
        by_name.insert(p.name.clone(), id);
    }
    let mut mismatches = Vec::new();
    let mut seen = 0usize;
    for entry in &manifest.tensors {
        let Some(&id) = by_name.get(&entry.name) else {
            mismatches.push(format!("unexpected tensor {:?}", entry.name));
            continue;
        };
        seen += 1;
        let expected = model.store.get(id).value.shape.clone();
        if expected != entry.shape {
            mismatches.push(format!(
                "{}: expected shape {:?}, found {:?}",
                entry.name, expected, entry.shape
            ));
            continue;
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::Data(format!(
                "{}: tensor {} extends past end of blob",
                blob_path.display(),
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.store.get_mut(id).value.data = data;
    }
    if seen != by_name.len() {
        for (name, _) in &by_name {
            if !manifest.tensors.iter().any(|t| &t.name == name) {
                mismatches.push(format!("missing tensor {name:?}"));
            }
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Shape(format!(
            "checkpoint {} does not match its config:\n  {}",
            dir.display(),
            mismatches.join("\n  ")
        )));
    }
    Ok((model, manifest.vocab))
}
