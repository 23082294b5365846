//! Domain-specific prompt stacks: the only trainable state of an edge model
//! and the only artifact an edge uploads.
//!
//! A stack owns `J` free prompt matrices (`b × d_src`) and `J` per-layer
//! affine couplings `d_src → d_dst`. In the vision→text direction the free
//! prompts live in the vision branch (`d_src = d_V`) and the text branch
//! receives their projections; text→vision is the mirror image.
//!
//! # Upload format
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `b"UMFDAPS\0"`                    |
//! | 8      | 2    | format version (`u16`)                  |
//! | 10     | 1    | direction (`0` = v2t, `1` = t2v)        |
//! | 11     | 4    | domain id (`u32`)                       |
//! | 15     | 16   | `J`, `b`, `d_T`, `d_V` (`u32` each)     |
//! | 31     | 4    | FNV-1a 32 checksum of bytes `0..31`     |
//! | 35     | …    | tensors as `f32`                        |
//!
//! Tensors follow layer by layer: prompt `l` (`b × d_src`, row-major),
//! projection weight `l` (`d_src × d_dst`, row-major), projection bias `l`
//! (`d_dst`). The file is exactly `HEADER_LEN + 4 · parameter_count` bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"UMFDAPS\0";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 35;

const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Free prompts in the vision branch, projected into the text branch.
    #[serde(rename = "v2t")]
    VisionToText,
    /// Free prompts in the text branch, projected into the vision branch.
    #[serde(rename = "t2v")]
    TextToVision,
}

impl Direction {
    fn code(self) -> u8 {
        match self {
            Direction::VisionToText => 0,
            Direction::TextToVision => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Direction::VisionToText),
            1 => Some(Direction::TextToVision),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::VisionToText => "v2t",
            Direction::TextToVision => "t2v",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2t" => Ok(Direction::VisionToText),
            "t2v" => Ok(Direction::TextToVision),
            other => Err(Error::Config(format!("unknown direction `{other}` (expected v2t or t2v)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptStack {
    pub domain_id: u32,
    pub direction: Direction,
    pub version: u16,
    depth: usize,
    length: usize,
    text_width: usize,
    vision_width: usize,
    pub free_prompts: Vec<Matrix>,
    pub proj_weights: Vec<Matrix>,
    pub proj_biases: Vec<Matrix>,
}

impl PromptStack {
    /// Prompts ~ N(0, 0.02), weights ~ N(0, 1/√d_src), zero biases.
    pub fn init(config: &EncoderConfig, direction: Direction, domain_id: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        let (src, dst) = widths(direction, config.text_width, config.vision_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((domain_id as u64) << 24) ^ 0x7072_6f6d);
        let w_std = 1.0 / (src as f64).sqrt();
        let mut free_prompts = Vec::with_capacity(config.prompt_depth);
        let mut proj_weights = Vec::with_capacity(config.prompt_depth);
        for _ in 0..config.prompt_depth {
            free_prompts.push(Matrix::random_normal(config.prompt_len, src, PROMPT_INIT_STD, &mut rng));
            proj_weights.push(Matrix::random_normal(src, dst, w_std, &mut rng));
        }
        Ok(Self {
            domain_id,
            direction,
            version: FORMAT_VERSION,
            depth: config.prompt_depth,
            length: config.prompt_len,
            text_width: config.text_width,
            vision_width: config.vision_width,
            free_prompts,
            proj_weights,
            proj_biases: (0..config.prompt_depth).map(|_| Matrix::zeros(1, dst)).collect(),
        })
    }

    /// Builds a stack from explicit tensors, checking every shape.
    pub fn from_parts(
        domain_id: u32,
        direction: Direction,
        text_width: usize,
        vision_width: usize,
        free_prompts: Vec<Matrix>,
        proj_weights: Vec<Matrix>,
        proj_biases: Vec<Matrix>,
    ) -> Result<Self> {
        let depth = free_prompts.len();
        let length = free_prompts.first().map_or(0, Matrix::rows);
        if depth == 0 || length == 0 {
            return Err(Error::Shape("a prompt stack needs at least one non-empty layer".into()));
        }
        let stack = Self {
            domain_id,
            direction,
            version: FORMAT_VERSION,
            depth,
            length,
            text_width,
            vision_width,
            free_prompts,
            proj_weights,
            proj_biases,
        };
        stack.check_shapes()?;
        Ok(stack)
    }

    fn check_shapes(&self) -> Result<()> {
        let (src, dst) = self.src_dst();
        if self.proj_weights.len() != self.depth || self.proj_biases.len() != self.depth {
            return Err(Error::Shape(format!("expected {} projections", self.depth)));
        }
        for l in 0..self.depth {
            let checks = [
                ("free_prompt", self.free_prompts[l].shape(), (self.length, src)),
                ("proj_weight", self.proj_weights[l].shape(), (src, dst)),
                ("proj_bias", self.proj_biases[l].shape(), (1, dst)),
            ];
            for (name, got, want) in checks {
                if got != want {
                    return Err(Error::Shape(format!("{name}[{l}] is {got:?}, expected {want:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn text_width(&self) -> usize {
        self.text_width
    }

    pub fn vision_width(&self) -> usize {
        self.vision_width
    }

    /// `(d_src, d_dst)` for this stack's direction.
    pub fn src_dst(&self) -> (usize, usize) {
        widths(self.direction, self.text_width, self.vision_width)
    }

    /// `J · (b·d_src + d_src·d_dst + d_dst)`
    pub fn parameter_count(&self) -> usize {
        parameter_count(self.depth, self.length, self.direction, self.text_width, self.vision_width)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Matrix::is_finite)
    }

    /// Fails unless the stack fits `config` (depth, length, branch widths).
    pub fn check_compatible(&self, config: &EncoderConfig) -> Result<()> {
        let ours = (self.depth, self.length, self.text_width, self.vision_width);
        let theirs = (config.prompt_depth, config.prompt_len, config.text_width, config.vision_width);
        if ours != theirs {
            return Err(Error::Shape(format!(
                "prompt stack (J, b, d_T, d_V) = {ours:?} does not match encoder {theirs:?}"
            )));
        }
        Ok(())
    }

    /// Tensors in upload order.
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        (0..self.depth).flat_map(move |l| [&self.free_prompts[l], &self.proj_weights[l], &self.proj_biases[l]])
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(3 * self.depth);
        for ((p, w), b) in self.free_prompts.iter_mut().zip(self.proj_weights.iter_mut()).zip(self.proj_biases.iter_mut()) {
            out.push(p);
            out.push(w);
            out.push(b);
        }
        out
    }

    /// `proj^l(free_prompt^l)`, row-wise affine map (`b × d_dst`).
    pub fn project_layer(&self, layer: usize) -> Result<Matrix> {
        if layer >= self.depth {
            return Err(Error::Index { what: "prompt layer", index: layer, bound: self.depth });
        }
        let mut out = self.free_prompts[layer].matmul(&self.proj_weights[layer]);
        let bias = self.proj_biases[layer].data();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Places every tensor on `g`; projections are computed once here so all
    /// forwards on the same tape share them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundStack {
        let mut prompts = Vec::with_capacity(self.depth);
        let mut weights = Vec::with_capacity(self.depth);
        let mut biases = Vec::with_capacity(self.depth);
        let mut projected = Vec::with_capacity(self.depth);
        for l in 0..self.depth {
            let p = g.leaf(self.free_prompts[l].clone(), trainable);
            let w = g.leaf(self.proj_weights[l].clone(), trainable);
            let b = g.leaf(self.proj_biases[l].clone(), trainable);
            projected.push(g.linear(p, w, Some(b)));
            prompts.push(p);
            weights.push(w);
            biases.push(b);
        }
        BoundStack { direction: self.direction, prompts, weights, biases, projected }
    }

    /// `θ ← θ − lr · ∇θ` over every tensor.
    pub fn sgd_update(&mut self, grads: &StackGradients, lr: f64) -> Result<()> {
        if grads.tensors.len() != 3 * self.depth {
            return Err(Error::Shape("gradient does not match stack layout".into()));
        }
        for (t, g) in self.tensors_mut().into_iter().zip(&grads.tensors) {
            if t.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape {:?} vs parameter {:?}", g.shape(), t.shape())));
            }
            for (v, &d) in t.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
        Ok(())
    }

    /// Flat parameter vector in upload order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.tensors().flat_map(|m| m.data().iter().copied()).collect()
    }

    /// Overwrites parameters from a flat vector in upload order.
    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", values.len(), self.parameter_count())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.direction.code());
        out.extend_from_slice(&self.domain_id.to_le_bytes());
        for v in [self.depth, self.length, self.text_width, self.vision_width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let crc = fnv1a32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        for t in self.tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::deserialize("header", format!("{} bytes, need at least {HEADER_LEN}", bytes.len())));
        }
        if &bytes[0..8] != MAGIC {
            return Err(Error::deserialize("magic", "not a prompt stack upload"));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != FORMAT_VERSION {
            return Err(Error::deserialize("version", format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        let direction = Direction::from_code(bytes[10])
            .ok_or_else(|| Error::deserialize("direction", format!("invalid direction code {}", bytes[10])))?;
        let domain_id = u32_at(11);
        let dims = [u32_at(15), u32_at(19), u32_at(23), u32_at(27)];
        let names = ["J", "b", "d_T", "d_V"];
        for (name, &v) in names.iter().zip(&dims) {
            if v == 0 || v > 1 << 16 {
                return Err(Error::deserialize(*name, format!("implausible value {v}")));
            }
        }
        let stored = u32_at(31);
        if stored != fnv1a32(&bytes[0..31]) {
            return Err(Error::deserialize("header_checksum", "header bytes do not match their checksum"));
        }
        let [depth, length, text_width, vision_width] = dims.map(|v| v as usize);
        let count = parameter_count(depth, length, direction, text_width, vision_width);
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() != expected {
            return Err(Error::deserialize(
                "tensors",
                format!("payload is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let (src, dst) = widths(direction, text_width, vision_width);
        let mut offset = HEADER_LEN;
        let mut take = |rows: usize, cols: usize| {
            let data = bytes[offset..offset + 4 * rows * cols]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            offset += 4 * rows * cols;
            Matrix::from_vec(rows, cols, data)
        };
        let mut free_prompts = Vec::with_capacity(depth);
        let mut proj_weights = Vec::with_capacity(depth);
        let mut proj_biases = Vec::with_capacity(depth);
        for _ in 0..depth {
            free_prompts.push(take(length, src));
            proj_weights.push(take(src, dst));
            proj_biases.push(take(1, dst));
        }
        let stack = Self {
            domain_id,
            direction,
            version,
            depth,
            length,
            text_width,
            vision_width,
            free_prompts,
            proj_weights,
            proj_biases,
        };
        if !stack.is_finite() {
            return Err(Error::deserialize("tensors", "non-finite parameter"));
        }
        Ok(stack)
    }

    /// SHA-256 of the serialized upload, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.serialize()))
    }

    /// Writes the upload file plus a `<file>.json` sidecar duplicating the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = self.serialize();
        fs::write(path, &bytes)?;
        let sidecar = UploadManifest {
            format_version: self.version,
            direction: self.direction,
            domain_id: self.domain_id,
            prompt_depth: self.depth,
            prompt_len: self.length,
            text_width: self.text_width,
            vision_width: self.vision_width,
            parameter_count: self.parameter_count(),
            file_bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        fs::write(name, serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::deserialize(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Human-readable sidecar written next to each upload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadManifest {
    pub format_version: u16,
    pub direction: Direction,
    pub domain_id: u32,
    pub prompt_depth: usize,
    pub prompt_len: usize,
    pub text_width: usize,
    pub vision_width: usize,
    pub parameter_count: usize,
    pub file_bytes: usize,
    pub sha256: String,
}

pub fn parameter_count(depth: usize, length: usize, direction: Direction, text_width: usize, vision_width: usize) -> usize {
    let (src, dst) = widths(direction, text_width, vision_width);
    depth * (length * src + src * dst + dst)
}

fn widths(direction: Direction, text_width: usize, vision_width: usize) -> (usize, usize) {
    match direction {
        Direction::VisionToText => (vision_width, text_width),
        Direction::TextToVision => (text_width, vision_width),
    }
}

fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// A stack's tensors on a tape.
#[derive(Clone, Debug)]
pub struct BoundStack {
    pub direction: Direction,
    pub prompts: Vec<Var>,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    projected: Vec<Var>,
}

impl BoundStack {
    pub fn depth(&self) -> usize {
        self.prompts.len()
    }

    /// Prompt tokens fed to vision layer `layer` (0-based, `< J`).
    pub fn vision_prompt(&self, layer: usize) -> Var {
        match self.direction {
            Direction::VisionToText => self.prompts[layer],
            Direction::TextToVision => self.projected[layer],
        }
    }

    /// Prompt tokens fed to text layer `layer` (0-based, `< J`).
    pub fn text_prompt(&self, layer: usize) -> Var {
        match self.direction {
            Direction::VisionToText => self.projected[layer],
            Direction::TextToVision => self.prompts[layer],
        }
    }

    /// Collects this stack's gradients (zeros where the output does not depend on a tensor).
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> StackGradients {
        let mut tensors = Vec::with_capacity(3 * self.depth());
        for l in 0..self.depth() {
            for v in [self.prompts[l], self.weights[l], self.biases[l]] {
                let (r, c) = g.value(v).shape();
                tensors.push(grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(r, c)));
            }
        }
        StackGradients { tensors }
    }
}

/// Gradients for one stack, in upload order.
#[derive(Clone, Debug, PartialEq)]
pub struct StackGradients {
    pub tensors: Vec<Matrix>,
}

impl StackGradients {
    pub fn zeros_like(stack: &PromptStack) -> Self {
        Self { tensors: stack.tensors().map(|m| Matrix::zeros(m.rows(), m.cols())).collect() }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|m| m.data().iter().all(|&v| v == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig::toy()
    }

    #[test]
    fn toy_parameter_count() {
        let s = PromptStack::init(&toy(), Direction::VisionToText, 0, 1).unwrap();
        assert_eq!(s.parameter_count(), 2 * (2 * 24 + 24 * 16 + 16));
        assert_eq!(s.parameter_count(), 896);
        assert_eq!(s.flat_parameters().len(), 896);
        let t = PromptStack::init(&toy(), Direction::TextToVision, 0, 1).unwrap();
        assert_eq!(t.parameter_count(), 2 * (2 * 16 + 16 * 24 + 24));
        assert_eq!(t.src_dst(), (16, 24));
        assert_eq!(s.src_dst(), (24, 16));
    }

    #[test]
    fn init_is_deterministic() {
        let a = PromptStack::init(&toy(), Direction::VisionToText, 3, 42).unwrap();
        let b = PromptStack::init(&toy(), Direction::VisionToText, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = PromptStack::init(&toy(), Direction::VisionToText, 4, 43).unwrap();
        assert_ne!(a.free_prompts, c.free_prompts);
        assert!(a.proj_biases.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn projection_cases() {
        let mut s = PromptStack::init(&toy(), Direction::VisionToText, 0, 5).unwrap();
        for w in &mut s.proj_weights {
            *w = Matrix::zeros(24, 16);
        }
        assert_eq!(s.project_layer(1).unwrap(), Matrix::zeros(2, 16));
        assert!(matches!(s.project_layer(2), Err(Error::Index { .. })));

        let p = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.25, -1.0]]);
        let sq = PromptStack::from_parts(0, Direction::VisionToText, 3, 3, vec![p.clone()], vec![Matrix::identity(3)], vec![Matrix::zeros(1, 3)])
            .unwrap();
        assert_eq!(sq.project_layer(0).unwrap(), p);
    }

    #[test]
    fn projection_matches_triple_loop() {
        let s = PromptStack::init(&toy(), Direction::VisionToText, 0, 6).unwrap();
        let mut s = s;
        s.proj_biases[0] = Matrix::random_normal(1, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let got = s.project_layer(0).unwrap();
        let (p, w, b) = (&s.free_prompts[0], &s.proj_weights[0], &s.proj_biases[0]);
        for i in 0..p.rows() {
            for j in 0..w.cols() {
                let mut acc = b.get(0, j);
                for k in 0..p.cols() {
                    acc += p.get(i, k) * w.get(k, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn serialized_size_and_round_trip() {
        let s = PromptStack::init(&toy(), Direction::VisionToText, 7, 9).unwrap();
        let bytes = s.serialize();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 896);
        let back = PromptStack::deserialize(&bytes).unwrap();
        assert_eq!(back.serialize(), bytes);
        assert_eq!(back, s);
    }

    #[test]
    fn every_header_byte_is_guarded() {
        let bytes = PromptStack::init(&toy(), Direction::TextToVision, 2, 9).unwrap().serialize();
        for i in 0..HEADER_LEN {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(matches!(PromptStack::deserialize(&bad), Err(Error::Deserialize { .. })), "byte {i}");
        }
        let err = PromptStack::deserialize(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("tensors"));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(PromptStack::deserialize(&v).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn sgd_steps() {
        let mut s = PromptStack::init(&toy(), Direction::VisionToText, 0, 1).unwrap();
        let before = s.clone();
        s.sgd_update(&StackGradients::zeros_like(&s), 0.5).unwrap();
        assert_eq!(s, before);
        let grads = StackGradients { tensors: s.tensors().cloned().collect() };
        s.sgd_update(&grads, 1.0).unwrap();
        assert!(s.flat_parameters().iter().all(|&v| v == 0.0));

        let mut s = before.clone();
        let g: Vec<f64> = (0..896).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut gs = StackGradients::zeros_like(&s);
        let mut off = 0;
        for t in &mut gs.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&g[off..off + n]);
            off += n;
        }
        s.sgd_update(&gs, 0.003).unwrap();
        for ((new, old), d) in s.flat_parameters().iter().zip(before.flat_parameters()).zip(&g) {
            assert_eq!(*new, old - 0.003 * d);
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_idempotent(seed in 0u64..500, dom in 0u32..1000, t2v in proptest::bool::ANY) {
            let dir = if t2v { Direction::TextToVision } else { Direction::VisionToText };
            let s = PromptStack::init(&toy(), dir, dom, seed).unwrap();
            let once = s.serialize();
            let twice = PromptStack::deserialize(&once).unwrap().serialize();
            proptest::prop_assert_eq!(once, twice);
        }
    }
}
