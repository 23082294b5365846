//! A small frozen transformer dual encoder with deep prompt insertion.
//!
//! Both towers are pre-LN transformers with `L` blocks. The vision tower sees
//! `[c_V, q_1..q_s]` (class token plus patch embeddings); the text tower sees
//! `[c_T, e_1..e_n]` where `e` is a row of the [`ClassTokenTable`].
//!
//! With a prompt stack, blocks `1..=J` each receive a fresh prompt block in the
//! prompt slot (whatever the previous block wrote there is dropped), and
//! blocks `J+1..=L` carry the prompt slot forward unchanged in position:
//!
//! ```text
//! vision: [c_V | q | p̃]    text: [c_T | p | e]
//! ```
//!
//! The image embedding is `Proj_Ψ(LN(c_V^L))`; the text embedding is
//! `Proj_Φ(LN(e_n^L))`, the last template slot.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::prompt::{BoundStack, Direction, PromptStack};
use crate::synth::CHANNELS;
use crate::tensor::Matrix;

const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-5;
/// Images per tape when encoding large batches outside training.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer blocks per tower (`L`).
    pub layers: usize,
    /// Blocks that receive fresh prompts (`J`).
    pub prompt_depth: usize,
    /// Prompt tokens per block (`b`).
    pub prompt_len: usize,
    pub text_width: usize,
    pub vision_width: usize,
    /// Shared embedding width `d`.
    pub embed_dim: usize,
    pub heads: usize,
    /// Vision sequence length `s`; must be a perfect square.
    pub patch_count: usize,
    /// Template token count `n`.
    pub text_len: usize,
    pub image_size: usize,
    pub temperature: f64,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            layers: 4,
            prompt_depth: 2,
            prompt_len: 2,
            text_width: 16,
            vision_width: 24,
            embed_dim: 8,
            heads: 2,
            patch_count: 16,
            text_len: 6,
            image_size: 8,
            temperature: 0.01,
        }
    }

    /// ViT-B/16-scale widths with `J = 12`, `b = 16`.
    pub fn paper() -> Self {
        Self {
            layers: 12,
            prompt_depth: 12,
            prompt_len: 16,
            text_width: 512,
            vision_width: 768,
            embed_dim: 512,
            heads: 8,
            patch_count: 196,
            text_len: 8,
            image_size: 224,
            temperature: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("prompt_depth", self.prompt_depth),
            ("prompt_len", self.prompt_len),
            ("text_width", self.text_width),
            ("vision_width", self.vision_width),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("patch_count", self.patch_count),
            ("image_size", self.image_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be >= 1")));
            }
        }
        if self.text_len < 2 {
            return Err(Error::Config("encoder.text_len must be >= 2 (class slot plus end slot)".into()));
        }
        if self.prompt_depth > self.layers {
            return Err(Error::Config(format!(
                "encoder.prompt_depth ({}) exceeds layers ({})",
                self.prompt_depth, self.layers
            )));
        }
        if self.text_width % self.heads != 0 || self.vision_width % self.heads != 0 {
            return Err(Error::Config("encoder widths must be divisible by heads".into()));
        }
        let grid = self.grid();
        if grid * grid != self.patch_count {
            return Err(Error::Config(format!("encoder.patch_count ({}) is not a perfect square", self.patch_count)));
        }
        if self.image_size % grid != 0 {
            return Err(Error::Config(format!(
                "encoder.image_size ({}) is not divisible by the patch grid ({grid})",
                self.image_size
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("encoder.temperature must be positive".into()));
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        (self.patch_count as f64).sqrt().round() as usize
    }

    pub fn patch_side(&self) -> usize {
        self.image_size / self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_side() * self.patch_side()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    /// Template slot holding the class token; the end slot `n - 1` follows it.
    pub fn class_slot(&self) -> usize {
        self.text_len - 2
    }
}

/// One pre-LN transformer block, generic over storage (`Matrix`) or tape handles (`Var`).
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub w_qkv: T,
    pub b_qkv: T,
    pub w_out: T,
    pub b_out: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w_fc1: T,
    pub b_fc1: T,
    pub w_fc2: T,
    pub b_fc2: T,
}

impl<T> Block<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> Block<U> {
        let mut m = |name: &str, t: &T| f(format!("{prefix}.{name}"), t);
        Block {
            ln1_g: m("ln1_g", &self.ln1_g),
            ln1_b: m("ln1_b", &self.ln1_b),
            w_qkv: m("w_qkv", &self.w_qkv),
            b_qkv: m("b_qkv", &self.b_qkv),
            w_out: m("w_out", &self.w_out),
            b_out: m("b_out", &self.b_out),
            ln2_g: m("ln2_g", &self.ln2_g),
            ln2_b: m("ln2_b", &self.ln2_b),
            w_fc1: m("w_fc1", &self.w_fc1),
            b_fc1: m("b_fc1", &self.b_fc1),
            w_fc2: m("w_fc2", &self.w_fc2),
            b_fc2: m("b_fc2", &self.b_fc2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Towers<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub class_token: T,
    pub vision_pos: T,
    pub vision_blocks: Vec<Block<T>>,
    pub vision_ln_g: T,
    pub vision_ln_b: T,
    pub vision_proj: T,
    pub start_token: T,
    pub text_blocks: Vec<Block<T>>,
    pub text_ln_g: T,
    pub text_ln_b: T,
    pub text_proj: T,
}

impl<T> Towers<T> {
    /// Applies `f` to every tensor with its checkpoint name, in checkpoint order.
    pub fn map<U>(&self, mut f: impl FnMut(String, &T) -> U) -> Towers<U> {
        let f = &mut f;
        Towers {
            patch_w: f("vision.patch_w".into(), &self.patch_w),
            patch_b: f("vision.patch_b".into(), &self.patch_b),
            class_token: f("vision.class_token".into(), &self.class_token),
            vision_pos: f("vision.pos".into(), &self.vision_pos),
            vision_blocks: self.vision_blocks.iter().enumerate().map(|(i, b)| b.map(&format!("vision.blocks.{i}"), f)).collect(),
            vision_ln_g: f("vision.ln_post_g".into(), &self.vision_ln_g),
            vision_ln_b: f("vision.ln_post_b".into(), &self.vision_ln_b),
            vision_proj: f("vision.proj".into(), &self.vision_proj),
            start_token: f("text.start_token".into(), &self.start_token),
            text_blocks: self.text_blocks.iter().enumerate().map(|(i, b)| b.map(&format!("text.blocks.{i}"), f)).collect(),
            text_ln_g: f("text.ln_final_g".into(), &self.text_ln_g),
            text_ln_b: f("text.ln_final_b".into(), &self.text_ln_b),
            text_proj: f("text.proj".into(), &self.text_proj),
        }
    }
}

/// Fixed token embeddings `E` of the template "a photo of a <category>." for
/// every class: shared template rows with the class slot swapped per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTokenTable {
    /// `n × d_T` template embeddings, positional information included.
    pub template: Matrix,
    /// `K × d_T`; row `k` replaces the class slot for class `k`.
    pub class_embed: Matrix,
    class_slot: usize,
}

impl ClassTokenTable {
    pub fn new(config: &EncoderConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_626c_65);
        Ok(Self {
            template: Matrix::random_normal(config.text_len, config.text_width, 1.0, &mut rng),
            class_embed: Matrix::random_normal(num_classes, config.text_width, 1.0, &mut rng),
            class_slot: config.class_slot(),
        })
    }

    pub fn from_parts(template: Matrix, class_embed: Matrix) -> Result<Self> {
        if template.rows() < 2 || template.cols() != class_embed.cols() {
            return Err(Error::Shape("class token table: template and class widths disagree".into()));
        }
        let class_slot = template.rows() - 2;
        Ok(Self { template, class_embed, class_slot })
    }

    pub fn num_classes(&self) -> usize {
        self.class_embed.rows()
    }

    pub fn text_len(&self) -> usize {
        self.template.rows()
    }

    /// `e_k`: the `n × d_T` token embeddings for class `k`.
    pub fn class_tokens(&self, class: usize) -> Result<Matrix> {
        if class >= self.num_classes() {
            return Err(Error::Index { what: "class", index: class, bound: self.num_classes() });
        }
        let mut m = self.template.clone();
        m.row_mut(self.class_slot).copy_from_slice(self.class_embed.row(class));
        Ok(m)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundTable {
        BoundTable {
            template: g.leaf(self.template.clone(), trainable),
            class_embed: g.leaf(self.class_embed.clone(), trainable),
            class_slot: self.class_slot,
            num_classes: self.num_classes(),
            text_len: self.text_len(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTable {
    pub template: Var,
    pub class_embed: Var,
    class_slot: usize,
    num_classes: usize,
    text_len: usize,
}

impl BoundTable {
    fn class_tokens(&self, g: &mut Graph, class: usize) -> Var {
        let cs = self.class_slot;
        let head = g.slice_rows(self.template, 0, cs);
        let cls = g.slice_rows(self.class_embed, class, 1);
        let tail = g.slice_rows(self.template, cs + 1, self.text_len - cs - 1);
        g.concat_rows(&[head, cls, tail])
    }
}

/// Per-block record of one instrumented forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    /// 1-based block index.
    pub layer: usize,
    pub input_len: usize,
    pub fresh_prompt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    weights: Towers<Matrix>,
}

/// Input to [`DualEncoder::forward_maple_direction`].
#[derive(Clone, Copy, Debug)]
pub enum Modality<'a> {
    Image(&'a [f32]),
    Text(usize),
}

impl DualEncoder {
    /// Random frozen backbone; weights are rounded through `f32` so checkpoints reload bit-exactly.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656e_636f_6465);
        let c = &config;
        let mut lin = |i: usize, o: usize| Matrix::random_normal(i, o, 1.0 / (i as f64).sqrt(), &mut rng);
        let blocks = |w: usize, lin: &mut dyn FnMut(usize, usize) -> Matrix| -> Vec<Block<Matrix>> {
            (0..c.layers)
                .map(|_| Block {
                    ln1_g: Matrix::filled(1, w, 1.0),
                    ln1_b: Matrix::zeros(1, w),
                    w_qkv: lin(w, 3 * w),
                    b_qkv: Matrix::zeros(1, 3 * w),
                    w_out: lin(w, w).map(|v| v * 0.5),
                    b_out: Matrix::zeros(1, w),
                    ln2_g: Matrix::filled(1, w, 1.0),
                    ln2_b: Matrix::zeros(1, w),
                    w_fc1: lin(w, MLP_RATIO * w),
                    b_fc1: Matrix::zeros(1, MLP_RATIO * w),
                    w_fc2: lin(MLP_RATIO * w, w).map(|v| v * 0.5),
                    b_fc2: Matrix::zeros(1, w),
                })
                .collect()
        };
        let vision_blocks = blocks(c.vision_width, &mut lin);
        let text_blocks = blocks(c.text_width, &mut lin);
        let weights = Towers {
            patch_w: lin(c.patch_dim(), c.vision_width),
            patch_b: Matrix::zeros(1, c.vision_width),
            class_token: lin(1, c.vision_width),
            vision_pos: lin(1 + c.patch_count, c.vision_width).map(|v| v * 0.5),
            vision_blocks,
            vision_ln_g: Matrix::filled(1, c.vision_width, 1.0),
            vision_ln_b: Matrix::zeros(1, c.vision_width),
            vision_proj: lin(c.vision_width, c.embed_dim),
            start_token: lin(1, c.text_width),
            text_blocks,
            text_ln_g: Matrix::filled(1, c.text_width, 1.0),
            text_ln_b: Matrix::zeros(1, c.text_width),
            text_proj: lin(c.text_width, c.embed_dim),
        };
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: EncoderConfig, weights: Towers<Matrix>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        if reference.weights.vision_blocks.len() != weights.vision_blocks.len()
            || reference.weights.text_blocks.len() != weights.text_blocks.len()
        {
            return Err(Error::Shape("block count does not match encoder.layers".into()));
        }
        let candidate = Self { config, weights };
        for ((name, a), (_, b)) in reference.named_tensors().into_iter().zip(candidate.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{name}: shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        Ok(candidate)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &Towers<Matrix> {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    /// Named tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut names = Vec::new();
        self.weights.map(|name, _| names.push(name));
        let mut refs = Vec::with_capacity(names.len());
        collect_refs(&self.weights, &mut refs);
        names.into_iter().zip(refs).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        BoundEncoder { config: self.config.clone(), towers: self.weights.map(|_, m| g.leaf(m.clone(), trainable)) }
    }

    /// Replaces every weight (used by the setup-time warm-up only).
    pub(crate) fn set_weights(&mut self, weights: Towers<Matrix>) {
        self.weights = weights;
    }

    fn check_stack(&self, stack: Option<&PromptStack>) -> Result<()> {
        match stack {
            Some(s) => s.check_compatible(&self.config),
            None => Ok(()),
        }
    }

    /// `z = Ψ(x, P)`; `stack = None` is the unprompted (zero-shot) path.
    pub fn encode_image(&self, image: &[f32], stack: Option<&PromptStack>) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[image], stack)?.into_vec())
    }

    /// Row `i` is the embedding of `images[i]`.
    pub fn encode_images(&self, images: &[&[f32]], stack: Option<&PromptStack>) -> Result<Matrix> {
        self.check_stack(stack)?;
        let mut out = Matrix::zeros(images.len(), self.config.embed_dim);
        for (chunk_idx, chunk) in images.chunks(INFERENCE_CHUNK).enumerate() {
            let mut g = Graph::new();
            let enc = self.bind(&mut g, false);
            let bs = stack.map(|s| s.bind(&mut g, false));
            for (j, img) in chunk.iter().enumerate() {
                let z = enc.image(&mut g, img, bs.as_ref(), None)?;
                out.row_mut(chunk_idx * INFERENCE_CHUNK + j).copy_from_slice(g.value(z).data());
            }
        }
        Ok(out)
    }

    /// Image forward that also reports what each block consumed.
    pub fn encode_image_traced(&self, image: &[f32], stack: Option<&PromptStack>) -> Result<(Vec<f64>, Vec<LayerTrace>)> {
        self.check_stack(stack)?;
        let mut g = Graph::new();
        let enc = self.bind(&mut g, false);
        let bs = stack.map(|s| s.bind(&mut g, false));
        let mut trace = Vec::new();
        let z = enc.image(&mut g, image, bs.as_ref(), Some(&mut trace))?;
        Ok((g.value(z).data().to_vec(), trace))
    }

    /// `w_k = Φ(E_k, P)`.
    pub fn encode_text(&self, table: &ClassTokenTable, class: usize, stack: Option<&PromptStack>) -> Result<Vec<f64>> {
        self.check_stack(stack)?;
        let mut g = Graph::new();
        let enc = self.bind(&mut g, false);
        let bt = table.bind(&mut g, false);
        let bs = stack.map(|s| s.bind(&mut g, false));
        let w = enc.text(&mut g, &bt, class, bs.as_ref(), None)?;
        Ok(g.value(w).data().to_vec())
    }

    pub fn encode_text_traced(
        &self,
        table: &ClassTokenTable,
        class: usize,
        stack: Option<&PromptStack>,
    ) -> Result<(Vec<f64>, Vec<LayerTrace>)> {
        self.check_stack(stack)?;
        let mut g = Graph::new();
        let enc = self.bind(&mut g, false);
        let bt = table.bind(&mut g, false);
        let bs = stack.map(|s| s.bind(&mut g, false));
        let mut trace = Vec::new();
        let w = enc.text(&mut g, &bt, class, bs.as_ref(), Some(&mut trace))?;
        Ok((g.value(w).data().to_vec(), trace))
    }

    /// `W`: one row per class.
    pub fn encode_text_all(&self, table: &ClassTokenTable, stack: Option<&PromptStack>) -> Result<Matrix> {
        self.check_stack(stack)?;
        let mut g = Graph::new();
        let enc = self.bind(&mut g, false);
        let bt = table.bind(&mut g, false);
        let bs = stack.map(|s| s.bind(&mut g, false));
        let w = enc.text_all(&mut g, &bt, bs.as_ref())?;
        Ok(g.value(w).clone())
    }

    /// The coupling direction that projects text prompts into the vision
    /// branch; rejects vision→text stacks.
    pub fn forward_maple_direction(&self, input: Modality<'_>, stack: &PromptStack, table: &ClassTokenTable) -> Result<Vec<f64>> {
        if stack.direction != Direction::TextToVision {
            return Err(Error::Contract("forward_maple_direction requires a text→vision prompt stack".into()));
        }
        match input {
            Modality::Image(img) => self.encode_image(img, Some(stack)),
            Modality::Text(class) => self.encode_text(table, class, Some(stack)),
        }
    }

    /// Little-endian `f32` serialization of every weight in checkpoint order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, m) in self.named_tensors() {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the checkpoint tensor bytes.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.weight_bytes()))
    }
}

fn collect_refs<'a>(t: &'a Towers<Matrix>, out: &mut Vec<&'a Matrix>) {
    out.extend([&t.patch_w, &t.patch_b, &t.class_token, &t.vision_pos]);
    for b in &t.vision_blocks {
        block_refs(b, out);
    }
    out.extend([&t.vision_ln_g, &t.vision_ln_b, &t.vision_proj, &t.start_token]);
    for b in &t.text_blocks {
        block_refs(b, out);
    }
    out.extend([&t.text_ln_g, &t.text_ln_b, &t.text_proj]);
}

fn block_refs<'a>(b: &'a Block<Matrix>, out: &mut Vec<&'a Matrix>) {
    out.extend([
        &b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.ln2_g, &b.ln2_b, &b.w_fc1, &b.b_fc1, &b.w_fc2,
        &b.b_fc2,
    ]);
}

/// Splits a `C × H × W` image into `s` flattened patches (`s × C·p·p`), row-major over the grid.
pub fn patchify(image: &[f32], config: &EncoderConfig) -> Matrix {
    let size = config.image_size;
    let p = config.patch_side();
    let grid = size / p;
    let plane = size * size;
    let mut out = Matrix::zeros(grid * grid, config.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            let mut k = 0;
            for c in 0..CHANNELS {
                for dy in 0..p {
                    for dx in 0..p {
                        row[k] = image[c * plane + (gy * p + dy) * size + gx * p + dx] as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Encoder weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    config: EncoderConfig,
    pub towers: Towers<Var>,
}

fn block_forward(g: &mut Graph, b: &Block<Var>, x: Var, heads: usize) -> Var {
    let h = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS);
    let qkv = g.linear(h, b.w_qkv, Some(b.b_qkv));
    let a = g.attention(qkv, heads);
    let o = g.linear(a, b.w_out, Some(b.b_out));
    let x = g.add(x, o);
    let h = g.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS);
    let f = g.linear(h, b.w_fc1, Some(b.b_fc1));
    let f = g.gelu(f);
    let f = g.linear(f, b.w_fc2, Some(b.b_fc2));
    g.add(x, f)
}

/// Runs the block stack. `core` is the unprompted prefix length (`1 + s`) in
/// the vision tower, or `1` (the start token) in the text tower, whose
/// template rows follow the prompt slot instead of preceding it.
fn prompted_blocks(
    g: &mut Graph,
    blocks: &[Block<Var>],
    heads: usize,
    mut x: Var,
    layout: SlotLayout,
    fresh: &dyn Fn(usize) -> Option<Var>,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> (Var, bool) {
    let mut has_slot = false;
    for (l, block) in blocks.iter().enumerate() {
        let input = match fresh(l) {
            Some(p) => {
                let b = g.value(p).rows();
                let len = g.value(x).rows();
                let input = match layout {
                    SlotLayout::Suffix { core } => {
                        let head = if has_slot { g.slice_rows(x, 0, core) } else { x };
                        g.concat_rows(&[head, p])
                    }
                    SlotLayout::AfterFirst => {
                        let first = g.slice_rows(x, 0, 1);
                        let skip = if has_slot { 1 + b } else { 1 };
                        let rest = g.slice_rows(x, skip, len - skip);
                        g.concat_rows(&[first, p, rest])
                    }
                };
                has_slot = true;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(LayerTrace { layer: l + 1, input_len: g.value(input).rows(), fresh_prompt: true });
                }
                input
            }
            None => {
                if let Some(t) = trace.as_deref_mut() {
                    t.push(LayerTrace { layer: l + 1, input_len: g.value(x).rows(), fresh_prompt: false });
                }
                x
            }
        };
        x = block_forward(g, block, input, heads);
    }
    (x, has_slot)
}

#[derive(Clone, Copy)]
enum SlotLayout {
    Suffix { core: usize },
    AfterFirst,
}

impl BoundEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `1 × d` image embedding.
    pub fn image(&self, g: &mut Graph, image: &[f32], stack: Option<&BoundStack>, trace: Option<&mut Vec<LayerTrace>>) -> Result<Var> {
        let c = &self.config;
        if image.len() != c.image_len() {
            return Err(Error::Shape(format!("image has {} values, encoder expects {}", image.len(), c.image_len())));
        }
        let t = &self.towers;
        let patches = g.constant(patchify(image, c));
        let q = g.linear(patches, t.patch_w, Some(t.patch_b));
        let x = g.concat_rows(&[t.class_token, q]);
        let x = g.add(x, t.vision_pos);
        let depth = c.prompt_depth;
        let fresh = |l: usize| stack.filter(|_| l < depth).map(|s| s.vision_prompt(l));
        let (x, _) = prompted_blocks(g, &t.vision_blocks, c.heads, x, SlotLayout::Suffix { core: 1 + c.patch_count }, &fresh, trace);
        let cls = g.slice_rows(x, 0, 1);
        let h = g.layer_norm(cls, t.vision_ln_g, t.vision_ln_b, LN_EPS);
        Ok(g.linear(h, t.vision_proj, None))
    }

    /// Stacks image embeddings into an `n × d` node.
    pub fn images(&self, g: &mut Graph, images: &[&[f32]], stack: Option<&BoundStack>) -> Result<Var> {
        let rows = images.iter().map(|img| self.image(g, img, stack, None)).collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }

    /// `1 × d` text embedding of class `class`.
    pub fn text(
        &self,
        g: &mut Graph,
        table: &BoundTable,
        class: usize,
        stack: Option<&BoundStack>,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Var> {
        if class >= table.num_classes {
            return Err(Error::Index { what: "class", index: class, bound: table.num_classes });
        }
        let c = &self.config;
        let t = &self.towers;
        let e = table.class_tokens(g, class);
        let x = g.concat_rows(&[t.start_token, e]);
        let depth = c.prompt_depth;
        let fresh = |l: usize| stack.filter(|_| l < depth).map(|s| s.text_prompt(l));
        let (x, _) = prompted_blocks(g, &t.text_blocks, c.heads, x, SlotLayout::AfterFirst, &fresh, trace);
        let len = g.value(x).rows();
        let last = g.slice_rows(x, len - 1, 1);
        let h = g.layer_norm(last, t.text_ln_g, t.text_ln_b, LN_EPS);
        Ok(g.linear(h, t.text_proj, None))
    }

    /// `K × d` text classifier `W`.
    pub fn text_all(&self, g: &mut Graph, table: &BoundTable, stack: Option<&BoundStack>) -> Result<Var> {
        let rows = (0..table.num_classes).map(|k| self.text(g, table, k, stack, None)).collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory with `manifest.json` and `weights.f32`.

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into `weights.f32`, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub num_classes: usize,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

fn checkpoint_tensors<'a>(encoder: &'a DualEncoder, table: &'a ClassTokenTable) -> Vec<(String, &'a Matrix)> {
    let mut all = encoder.named_tensors();
    all.push(("table.template".into(), &table.template));
    all.push(("table.class_embed".into(), &table.class_embed));
    all
}

pub fn save_checkpoint(dir: &Path, encoder: &DualEncoder, table: &ClassTokenTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, m) in checkpoint_tensors(encoder, table) {
        entries.push(TensorEntry { name, rows: m.rows(), cols: m.cols(), offset });
        offset += m.len();
        for &v in m.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: encoder.config.clone(),
        num_classes: table.num_classes(),
        tensors: entries,
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(dir.join("weights.f32"), &blob)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(DualEncoder, ClassTokenTable)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::from(e).in_file(&mpath))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&mpath))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::deserialize("format_version", format!("unsupported {}", manifest.format_version)).in_file(&mpath));
    }
    let bpath = dir.join("weights.f32");
    let blob = fs::read(&bpath).map_err(|e| Error::from(e).in_file(&bpath))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::deserialize("sha256", "weights do not match manifest checksum").in_file(&bpath));
    }
    let values: Vec<f64> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    let mut by_name: BTreeMap<String, Matrix> = BTreeMap::new();
    for e in &manifest.tensors {
        let end = e.offset + e.rows * e.cols;
        if end > values.len() {
            return Err(Error::deserialize(e.name.clone(), "tensor extends past end of weights").in_file(&bpath));
        }
        by_name.insert(e.name.clone(), Matrix::from_vec(e.rows, e.cols, values[e.offset..end].to_vec()));
    }
    let config = manifest.config.clone();
    config.validate().map_err(|e| e.in_file(&mpath))?;
    let skeleton = DualEncoder::new(config.clone(), 0)?;
    let mut missing = None;
    let weights = skeleton.weights.map(|name, m| match by_name.remove(&name) {
        Some(t) => t,
        None => {
            missing.get_or_insert(name);
            m.clone()
        }
    });
    if let Some(name) = missing {
        return Err(Error::deserialize(name, "missing from checkpoint").in_file(&mpath));
    }
    let template = by_name.remove("table.template").ok_or_else(|| Error::deserialize("table.template", "missing"))?;
    let class_embed = by_name.remove("table.class_embed").ok_or_else(|| Error::deserialize("table.class_embed", "missing"))?;
    let encoder = DualEncoder::from_weights(config, weights).map_err(|e| e.in_file(&mpath))?;
    let table = ClassTokenTable::from_parts(template, class_embed)?;
    Ok((encoder, table))
}
