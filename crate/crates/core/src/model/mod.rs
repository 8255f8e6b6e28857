//! The multimodal encoder-decoder.
//!
//! Text embeddings and visual sentinel embeddings live in one table
//! (`shared.embed`) that also serves as the decoder input embedding and,
//! transposed, as the language-modeling head. Each region embedding is the sum
//! of a RoI projection, a box projection, an image-id embedding and the table
//! row of its `<vis_k>` token. Visual slots carry no sequence position.

mod checkpoint;
#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    FeedForward, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Position,
    RelativeBuckets, Scalar, Tensor, Var,
};
use crate::tokenizer::{Vocab, TEXT_SENTINELS};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    RelativeBias,
    LearnedAbsolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingVariant {
    SpanSentinel,
    TokenMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Shared,
    PerTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Regions per image; equals the number of `<vis_k>` tokens.
    pub regions: usize,
    pub d_roi: usize,
    pub positional: PositionalScheme,
    pub masking: MaskingVariant,
    pub max_text_len: usize,
    pub max_target_len: usize,
    pub images: usize,
    pub head_mode: HeadMode,
    /// Tasks owning a private LM head when `head_mode` is per-task.
    #[serde(default)]
    pub head_tasks: Vec<String>,
    #[serde(default)]
    pub buckets: RelativeBuckets,
    /// Candidate count of the discriminative VQA head, when present.
    #[serde(default)]
    pub vqa_candidates: Option<usize>,
    #[serde(default)]
    pub region_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d: 64,
            heads: 4,
            d_ff: 256,
            vocab_size: 512,
            regions: 8,
            d_roi: 16,
            positional: PositionalScheme::RelativeBias,
            masking: MaskingVariant::SpanSentinel,
            max_text_len: 64,
            max_target_len: 32,
            images: 2,
            head_mode: HeadMode::Shared,
            head_tasks: Vec::new(),
            buckets: RelativeBuckets::default(),
            vqa_candidates: None,
            region_head: false,
        }
    }
}

impl ModelConfig {
    /// Size preset of the 12+12 layer, 768-wide backbone with 36 regions.
    pub fn base() -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 12,
            d: 768,
            heads: 12,
            d_ff: 3072,
            vocab_size: 32_200,
            regions: 36,
            d_roi: 2048,
            max_text_len: 512,
            max_target_len: 64,
            ..Default::default()
        }
    }

    /// Pair a masking variant with its usual positional scheme.
    pub fn with_masking(mut self, masking: MaskingVariant) -> Self {
        self.masking = masking;
        self.positional = match masking {
            MaskingVariant::SpanSentinel => PositionalScheme::RelativeBias,
            MaskingVariant::TokenMask => PositionalScheme::LearnedAbsolute,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.regions == 0 || self.images == 0 {
            return Err(Error::Config("regions and images must be positive".into()));
        }
        let reserved = Vocab::reserved_count(self.regions);
        if self.vocab_size < reserved {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold the {reserved} reserved tokens",
                self.vocab_size
            )));
        }
        if self.head_mode == HeadMode::PerTask && self.head_tasks.is_empty() {
            return Err(Error::Config("per-task head mode needs at least one task".into()));
        }
        if self.max_target_len == 0 {
            return Err(Error::Config("max_target_len must be positive".into()));
        }
        Ok(())
    }

    /// Token that starts every decoder input.
    pub fn decoder_start(&self) -> u32 {
        match self.masking {
            MaskingVariant::SpanSentinel => 0,
            MaskingVariant::TokenMask => 1,
        }
    }

    /// Id of `<vis_k>` under the fixed reserved layout.
    pub fn visual_token(&self, k: usize) -> u32 {
        (5 + TEXT_SENTINELS + k - 1) as u32
    }
}

/// One detected region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionInput {
    pub roi: Vec<f32>,
    /// `(x1, y1, x2, y2)` in `[0, 1]`.
    pub bbox: [f32; 4],
    /// 1-based.
    pub image_id: usize,
    /// 1-based; selects the `<vis_k>` row.
    pub region_id: usize,
}

/// An encoder input: prefixed text ids and the regions of one or two images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderInput {
    pub text: Vec<u32>,
    pub regions: Vec<RegionInput>,
}

/// Which uses of the shared table read the live parameter. Disabled uses see
/// a stop-gradient copy, which isolates the gradient of one path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableUses {
    pub text_input: bool,
    pub region_ids: bool,
    pub output_head: bool,
}

impl Default for TableUses {
    fn default() -> Self {
        TableUses {
            text_input: true,
            region_ids: true,
            output_head: true,
        }
    }
}

/// Encoder output. Example `b` owns rows `b·len .. (b+1)·len` of `h`, laid
/// out as `text_len` text slots (right-padded) then `visual_len` regions.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h: Var,
    pub batch: usize,
    pub text_len: usize,
    pub visual_len: usize,
    /// Per-example true text lengths.
    pub text_lens: Vec<usize>,
    pub key_mask: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.text_len + self.visual_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unpadded length of example `b`: `|x| + (#images)·n`.
    pub fn example_len(&self, b: usize) -> usize {
        self.text_lens[b] + self.visual_len
    }

    /// Row index in `h` of region slot `j` of example `b`.
    pub fn visual_row(&self, b: usize, j: usize) -> usize {
        b * self.len() + self.text_len + j
    }

    /// Row index in `h` of text slot `i` of example `b`.
    pub fn text_row(&self, b: usize, i: usize) -> usize {
        b * self.len() + i
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

/// Parameter layout of the model; all forward functions read values from a
/// [`ParamStore`] passed in by the caller.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub uses: TableUses,
    embed: ParamId,
    enc_pos: Option<ParamId>,
    dec_pos: Option<ParamId>,
    enc_rel: Option<ParamId>,
    dec_rel: Option<ParamId>,
    roi: Linear,
    boxes: Linear,
    image_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    task_heads: Vec<(String, ParamId)>,
    vqa_head: Option<Mlp>,
    region_head: Option<Mlp>,
}

pub const EMBED: &str = "shared.embed";
pub const EMBED_ALIASES: [&str; 3] = [
    "encoder.embed_tokens.weight",
    "decoder.embed_tokens.weight",
    "lm_head.weight",
];

fn task_head_name(task: &str) -> String {
    format!("lm_head.{task}.weight")
}

impl Network {
    /// Register every parameter of `config` in `store`.
    pub fn build<S: Scalar>(config: &ModelConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embed = store.add(EMBED, Tensor::randn(&[config.vocab_size, d], 1.0, rng))?;
        for alias in EMBED_ALIASES {
            store.alias(alias, embed)?;
        }
        let (enc_pos, dec_pos, enc_rel, dec_rel) = match config.positional {
            PositionalScheme::LearnedAbsolute => (
                Some(store.add(
                    "encoder.embed_positions.weight",
                    Tensor::randn(&[config.max_text_len, d], 0.02, rng),
                )?),
                Some(store.add(
                    "decoder.embed_positions.weight",
                    Tensor::randn(&[config.max_target_len, d], 0.02, rng),
                )?),
                None,
                None,
            ),
            PositionalScheme::RelativeBias => {
                let nb = config.buckets.num_buckets;
                (
                    None,
                    None,
                    Some(store.add("encoder.relative_bias", Tensor::zeros(&[nb, config.heads]))?),
                    Some(store.add("decoder.relative_bias", Tensor::zeros(&[nb, config.heads]))?),
                )
            }
        };
        let roi = Linear::new(store, rng, "visual.roi", config.d_roi, d, true)?;
        let boxes = Linear::new(store, rng, "visual.box", 4, d, true)?;
        let image_embed = store.add("visual.image_embed", Tensor::randn(&[config.images, d], 1.0, rng))?;
        let mut encoder = Vec::with_capacity(config.enc_layers);
        for i in 0..config.enc_layers {
            let p = format!("encoder.layers.{i}");
            encoder.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, config.heads)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, config.d_ff, d)?,
            });
        }
        let enc_ln = LayerNorm::new(store, "encoder.final_ln", d)?;
        let mut decoder = Vec::with_capacity(config.dec_layers);
        for i in 0..config.dec_layers {
            let p = format!("decoder.layers.{i}");
            decoder.push(DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, config.heads)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{p}.cross_attn"), d, config.heads)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, config.d_ff, d)?,
            });
        }
        let dec_ln = LayerNorm::new(store, "decoder.final_ln", d)?;
        let mut net = Network {
            config: ModelConfig {
                head_mode: HeadMode::Shared,
                head_tasks: Vec::new(),
                vqa_candidates: None,
                region_head: false,
                ..config.clone()
            },
            uses: TableUses::default(),
            embed,
            enc_pos,
            dec_pos,
            enc_rel,
            dec_rel,
            roi,
            boxes,
            image_embed,
            encoder,
            enc_ln,
            decoder,
            dec_ln,
            task_heads: Vec::new(),
            vqa_head: None,
            region_head: None,
        };
        if config.head_mode == HeadMode::PerTask {
            net.add_task_heads(store, &config.head_tasks)?;
        }
        if let Some(k) = config.vqa_candidates {
            net.add_vqa_head(store, rng, k)?;
        }
        if config.region_head {
            net.add_region_head(store, rng)?;
        }
        Ok(net)
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Give each task a private LM head initialized from the shared one.
    pub fn add_task_heads<S: Scalar>(&mut self, store: &mut ParamStore<S>, tasks: &[String]) -> Result<()> {
        if tasks.is_empty() {
            return Err(Error::Config("per-task head mode needs at least one task".into()));
        }
        for task in tasks {
            if self.task_heads.iter().any(|(t, _)| t == task) {
                continue;
            }
            let value = store.value(self.embed).clone();
            let id = store.add(&task_head_name(task), value)?;
            self.task_heads.push((task.clone(), id));
            self.config.head_tasks.push(task.clone());
        }
        self.config.head_mode = HeadMode::PerTask;
        Ok(())
    }

    /// Add the candidate classifier over the decoder start state.
    pub fn add_vqa_head<S: Scalar>(&mut self, store: &mut ParamStore<S>, rng: &mut impl Rng, candidates: usize) -> Result<()> {
        if candidates == 0 {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        if let Some(k) = self.config.vqa_candidates {
            if k != candidates {
                return Err(Error::Config(format!(
                    "model already has a {k}-way answer head, asked for {candidates}"
                )));
            }
            return Ok(());
        }
        let d = self.config.d;
        self.vqa_head = Some(Mlp::new(store, rng, "vqa_head", d, d, candidates)?);
        self.config.vqa_candidates = Some(candidates);
        Ok(())
    }

    /// Add the region-scoring MLP over visual encoder states.
    pub fn add_region_head<S: Scalar>(&mut self, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<()> {
        if self.region_head.is_none() {
            let d = self.config.d;
            self.region_head = Some(Mlp::new(store, rng, "region_head", d, d, 1)?);
            self.config.region_head = true;
        }
        Ok(())
    }

    fn table<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, live: bool) -> Var {
        if live {
            g.param(store, self.embed)
        } else {
            g.detached_param(store, self.embed)
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Text embeddings for one or more right-padded sequences of length
    /// `len`, flattened to `[batch·len, d]`.
    fn embed_padded<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        ids: &[u32],
        len: usize,
        pos: Option<ParamId>,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let table = self.table(g, store, self.uses.text_input);
        let flat: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = g.embedding(table, &flat)?;
        match pos {
            Some(pos) => {
                let pt = g.param(store, pos);
                let max = g.shape(pt)[0];
                if len > max {
                    return Err(Error::InvalidArgument(format!(
                        "sequence of {len} exceeds the {max} learned positions"
                    )));
                }
                let idx: Vec<usize> = (0..ids.len()).map(|i| i % len.max(1)).collect();
                let p = g.embedding(pt, &idx)?;
                g.add(e, p)
            }
            None => Ok(e),
        }
    }

    /// `e^x` for a single input sequence, `[len, d]`.
    pub fn embed_text<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, ids: &[u32]) -> Result<Var> {
        self.embed_padded(g, store, ids, ids.len(), self.enc_pos)
    }

    /// `e^v`, `[regions, d]`.
    pub fn embed_visual<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        regions: &[RegionInput],
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = regions.len();
        let mut roi = Vec::with_capacity(n * cfg.d_roi);
        let mut boxes = Vec::with_capacity(n * 4);
        let mut images = Vec::with_capacity(n);
        let mut vis = Vec::with_capacity(n);
        for r in regions {
            if r.roi.len() != cfg.d_roi {
                return Err(Error::shape("embed_visual", &[r.roi.len()], &[cfg.d_roi]));
            }
            if r.image_id == 0 || r.image_id > cfg.images {
                return Err(Error::InvalidArgument(format!("image id {} out of range", r.image_id)));
            }
            if r.region_id == 0 || r.region_id > cfg.regions {
                return Err(Error::InvalidArgument(format!("region id {} out of range", r.region_id)));
            }
            roi.extend(r.roi.iter().map(|&v| S::lit(v as f64)));
            boxes.extend(r.bbox.iter().map(|&v| S::lit(v as f64)));
            images.push(r.image_id - 1);
            vis.push(cfg.visual_token(r.region_id) as usize);
        }
        let roi = g.constant(Tensor::new(&[n, cfg.d_roi], roi)?);
        let boxes = g.constant(Tensor::new(&[n, 4], boxes)?);
        let r = self.roi.forward(g, store, roi)?;
        let b = self.boxes.forward(g, store, boxes)?;
        let img_table = g.param(store, self.image_embed);
        let img = g.embedding(img_table, &images)?;
        let table = self.table(g, store, self.uses.region_ids);
        let rows = g.embedding(table, &vis)?;
        let s = g.add(r, b)?;
        let s = g.add(s, img)?;
        g.add(s, rows)
    }

    fn rel_bias<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        table: Option<ParamId>,
        queries: &[Position],
        keys: &[Position],
    ) -> Result<Option<Var>> {
        match table {
            Some(id) => {
                let t = g.param(store, id);
                let buckets = self.config.buckets.matrix(queries, keys);
                Ok(Some(g.gather_bias(t, &buckets, queries.len(), keys.len())?))
            }
            None => Ok(None),
        }
    }

    /// Bidirectional encoder over `[text | regions]` for each input. All
    /// inputs must carry the same number of regions.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, inputs: &[EncoderInput]) -> Result<Encoded> {
        let batch = inputs.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let visual_len = inputs[0].regions.len();
        if let Some(bad) = inputs.iter().find(|x| x.regions.len() != visual_len) {
            return Err(Error::shape("encode regions", &[visual_len], &[bad.regions.len()]));
        }
        let text_lens: Vec<usize> = inputs.iter().map(|x| x.text.len()).collect();
        let text_len = text_lens.iter().copied().max().unwrap_or(0);
        if text_len > self.config.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "input of {text_len} tokens exceeds max_text_len {}",
                self.config.max_text_len
            )));
        }
        let len = text_len + visual_len;
        let mut parts = Vec::new();
        let text_rows = batch * text_len;
        if text_len > 0 {
            let mut ids = Vec::with_capacity(text_rows);
            for x in inputs {
                ids.extend_from_slice(&x.text);
                ids.extend(std::iter::repeat(0).take(text_len - x.text.len()));
            }
            parts.push(self.embed_padded(g, store, &ids, text_len, self.enc_pos)?);
        }
        if visual_len > 0 {
            let regions: Vec<RegionInput> = inputs.iter().flat_map(|x| x.regions.iter().cloned()).collect();
            parts.push(self.embed_visual(g, store, &regions)?);
        }
        if parts.is_empty() {
            return Err(Error::InvalidArgument("encoder input has no tokens".into()));
        }
        let stacked = g.concat_rows(&parts)?;
        let mut order = Vec::with_capacity(batch * len);
        for b in 0..batch {
            order.extend((0..text_len).map(|i| b * text_len + i));
            order.extend((0..visual_len).map(|j| text_rows + b * visual_len + j));
        }
        let mut x = g.gather_rows(stacked, &order)?;
        let mut key_mask = Vec::with_capacity(batch * len);
        for &tl in &text_lens {
            key_mask.extend((0..text_len).map(|i| i < tl));
            key_mask.extend(std::iter::repeat(true).take(visual_len));
        }
        let positions: Vec<Position> = (0..text_len)
            .map(Position::Token)
            .chain(std::iter::repeat(Position::Visual).take(visual_len))
            .collect();
        let bias = self.rel_bias(g, store, self.enc_rel, &positions, &positions)?;
        for layer in &self.encoder {
            let y = layer.ln1.forward(g, store, x)?;
            let y = layer.attn.forward(g, store, y, y, batch, Some(key_mask.clone()), false, bias)?;
            x = g.add(x, y)?;
            let y = layer.ln2.forward(g, store, x)?;
            let y = layer.ffn.forward(g, store, y)?;
            x = g.add(x, y)?;
        }
        let h = self.enc_ln.forward(g, store, x)?;
        Ok(Encoded {
            h,
            batch,
            text_len,
            visual_len,
            text_lens,
            key_mask,
        })
    }

    /// Decoder hidden states `[batch·len, d]` for equal-length decoder
    /// inputs (each starting with the decoder start token).
    pub fn decode_hidden<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        enc: &Encoded,
        dec_inputs: &[Vec<u32>],
    ) -> Result<Var> {
        let batch = dec_inputs.len();
        if batch != enc.batch {
            return Err(Error::shape("decode", &[batch], &[enc.batch]));
        }
        let len = dec_inputs[0].len();
        if len == 0 || dec_inputs.iter().any(|x| x.len() != len) {
            return Err(Error::InvalidArgument("decoder inputs must be nonempty and of equal length".into()));
        }
        if len > self.config.max_target_len {
            return Err(Error::InvalidArgument(format!(
                "decoder prefix of {len} exceeds max_target_len {}",
                self.config.max_target_len
            )));
        }
        let ids: Vec<u32> = dec_inputs.iter().flatten().copied().collect();
        let mut x = self.embed_padded(g, store, &ids, len, self.dec_pos)?;
        let positions: Vec<Position> = (0..len).map(Position::Token).collect();
        let bias = self.rel_bias(g, store, self.dec_rel, &positions, &positions)?;
        for layer in &self.decoder {
            let y = layer.ln1.forward(g, store, x)?;
            let y = layer.self_attn.forward(g, store, y, y, batch, None, true, bias)?;
            x = g.add(x, y)?;
            let y = layer.ln2.forward(g, store, x)?;
            let y = layer
                .cross_attn
                .forward(g, store, y, enc.h, batch, Some(enc.key_mask.clone()), false, None)?;
            x = g.add(x, y)?;
            let y = layer.ln3.forward(g, store, x)?;
            let y = layer.ffn.forward(g, store, y)?;
            x = g.add(x, y)?;
        }
        self.dec_ln.forward(g, store, x)
    }

    /// The output projection used for `task`.
    pub fn head_param(&self, task: Option<&str>) -> ParamId {
        if self.config.head_mode == HeadMode::PerTask {
            if let Some(task) = task {
                if let Some((_, id)) = self.task_heads.iter().find(|(t, _)| t == task) {
                    return *id;
                }
            }
        }
        self.embed
    }

    /// Vocabulary logits for hidden rows `[r, d]`: `h·Eᵀ / √d`.
    pub fn lm_logits<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, hidden: Var, task: Option<&str>) -> Result<Var> {
        let id = self.head_param(task);
        let w = if id == self.embed {
            self.table(g, store, self.uses.output_head)
        } else {
            g.param(store, id)
        };
        let logits = g.matmul_nt(hidden, w)?;
        Ok(g.scale(logits, S::lit(1.0 / (self.config.d as f64).sqrt())))
    }

    /// Teacher-forced decoder inputs and per-position labels for targets
    /// that already end in EOS.
    pub fn teacher_forcing(&self, targets: &[Vec<u32>]) -> Result<(Vec<Vec<u32>>, Vec<Option<usize>>)> {
        let len = targets.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::InvalidArgument("loss over zero target tokens".into()));
        }
        let start = self.config.decoder_start();
        let mut inputs = Vec::with_capacity(targets.len());
        let mut labels = Vec::with_capacity(targets.len() * len);
        for t in targets {
            let mut x = Vec::with_capacity(len);
            x.push(start);
            x.extend_from_slice(&t[..t.len().saturating_sub(1)]);
            x.resize(len, 0);
            inputs.push(x);
            labels.extend(t.iter().map(|&y| Some(y as usize)));
            labels.extend(std::iter::repeat(None).take(len - t.len()));
        }
        Ok((inputs, labels))
    }

    /// Mean negative log-likelihood of the target tokens.
    pub fn generation_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &[EncoderInput],
        targets: &[Vec<u32>],
        task: Option<&str>,
    ) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::shape("generation_loss", &[inputs.len()], &[targets.len()]));
        }
        for t in targets {
            self.check_ids(t)?;
        }
        let enc = self.encode(g, store, inputs)?;
        let (dec_in, labels) = self.teacher_forcing(targets)?;
        let h = self.decode_hidden(g, store, &enc, &dec_in)?;
        let logits = self.lm_logits(g, store, h, task)?;
        g.cross_entropy(logits, &labels)
    }

    /// Candidate logits `[batch, K]` from the decoder state at the start token.
    pub fn vqa_logits<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, enc: &Encoded) -> Result<Var> {
        let head = self
            .vqa_head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no answer head".into()))?;
        let start = vec![vec![self.config.decoder_start()]; enc.batch];
        let h = self.decode_hidden(g, store, enc, &start)?;
        head.forward(g, store, h)
    }

    /// Soft-score weighted BCE over the candidate set; `scores` is
    /// `[batch][K]`, `None` where a candidate's score is undefined.
    pub fn discriminative_vqa_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &[EncoderInput],
        scores: &[Vec<Option<f32>>],
    ) -> Result<Var> {
        let k = self.config.vqa_candidates.unwrap_or(0);
        if k == 0 {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        if let Some(bad) = scores.iter().find(|s| s.len() != k) {
            return Err(Error::shape("discriminative_vqa_loss", &[bad.len()], &[k]));
        }
        let enc = self.encode(g, store, inputs)?;
        let logits = self.vqa_logits(g, store, &enc)?;
        let targets: Vec<Option<S>> = scores.iter().flatten().map(|s| s.map(|v| S::lit(v as f64))).collect();
        g.bce_with_logits(logits, &targets)
    }

    /// Region logits `[batch, visual_len]` from the visual encoder states.
    pub fn region_logits<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, enc: &Encoded) -> Result<Var> {
        let head = self
            .region_head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no region head".into()))?;
        let rows: Vec<usize> = (0..enc.batch)
            .flat_map(|b| (0..enc.visual_len).map(move |j| (b, j)))
            .map(|(b, j)| enc.visual_row(b, j))
            .collect();
        let v = g.gather_rows(enc.h, &rows)?;
        let s = head.forward(g, store, v)?;
        g.reshape(s, &[enc.batch, enc.visual_len])
    }

    /// `−log P(r*)` under a softmax over region scores; `targets` are 1-based
    /// region slots.
    pub fn region_scoring_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &[EncoderInput],
        targets: &[usize],
    ) -> Result<Var> {
        let enc = self.encode(g, store, inputs)?;
        if let Some(&bad) = targets.iter().find(|&&r| r == 0 || r > enc.visual_len) {
            return Err(Error::InvalidArgument(format!(
                "target region {bad} outside 1..={}",
                enc.visual_len
            )));
        }
        let logits = self.region_logits(g, store, &enc)?;
        let labels: Vec<Option<usize>> = targets.iter().map(|&r| Some(r - 1)).collect();
        g.cross_entropy(logits, &labels)
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f32> {
    pub net: Network,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Network::build(config, &mut params, &mut rng)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Same network in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn add_task_heads(&mut self, tasks: &[String]) -> Result<()> {
        self.net.add_task_heads(&mut self.params, tasks)
    }

    pub fn add_vqa_head(&mut self, rng: &mut impl Rng, candidates: usize) -> Result<()> {
        self.net.add_vqa_head(&mut self.params, rng, candidates)
    }

    pub fn add_region_head(&mut self, rng: &mut impl Rng) -> Result<()> {
        self.net.add_region_head(&mut self.params, rng)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
